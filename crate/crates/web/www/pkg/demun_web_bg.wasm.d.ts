/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_reconstruction_free: (a: number, b: number) => void;
export const loss_weights: (a: number, b: number, c: number) => [number, number, number, number];
export const reconstruct: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number];
export const reconstruction_adjoint: (a: number) => [number, number];
export const reconstruction_adjoint_psnr: (a: number) => number;
export const reconstruction_curve: (a: number) => [number, number];
export const reconstruction_estimate: (a: number, b: number) => [number, number];
export const reconstruction_k: (a: number) => number;
export const reconstruction_min_norm: (a: number) => [number, number];
export const reconstruction_min_norm_psnr: (a: number) => number;
export const reconstruction_original: (a: number) => [number, number];
export const sampling_mask: (a: number, b: number, c: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
