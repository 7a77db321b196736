/* tslint:disable */
/* eslint-disable */

export class Reconstruction {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    adjoint(): Float64Array;
    adjoint_psnr(): number;
    curve(): Float64Array;
    /**
     * Estimate after projection `step` (1-based).
     */
    estimate(step: number): Float64Array;
    k(): number;
    min_norm(): Float64Array;
    min_norm_psnr(): number;
    original(): Float64Array;
}

/**
 * Per-step weights of a loss id (`ll`, `iw:<omega>`, `skip:<L>`).
 */
export function loss_weights(loss: string, steps: number): Float64Array;

/**
 * Measures a generated `k x k` scene and runs an untrained unrolled network
 * whose projectors output zero, i.e. the plain gradient updates.
 */
export function reconstruct(algorithm: string, operator: string, k: number, rate: number, steps: number, sigma: number, seed: number): Reconstruction;

/**
 * `k * k` bytes, 1 where the DCT coefficient is measured.
 */
export function sampling_mask(k: number, rate: number, seed: number): Uint8Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_reconstruction_free: (a: number, b: number) => void;
    readonly loss_weights: (a: number, b: number, c: number) => [number, number, number, number];
    readonly reconstruct: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number];
    readonly reconstruction_adjoint: (a: number) => [number, number];
    readonly reconstruction_adjoint_psnr: (a: number) => number;
    readonly reconstruction_curve: (a: number) => [number, number];
    readonly reconstruction_estimate: (a: number, b: number) => [number, number];
    readonly reconstruction_k: (a: number) => number;
    readonly reconstruction_min_norm: (a: number) => [number, number];
    readonly reconstruction_min_norm_psnr: (a: number) => number;
    readonly reconstruction_original: (a: number) => [number, number];
    readonly sampling_mask: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
