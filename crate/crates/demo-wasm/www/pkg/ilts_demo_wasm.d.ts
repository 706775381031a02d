/* tslint:disable */
/* eslint-disable */

/**
 * Histogram of eigenvalue phases in `[-π, π]` over `n_systems` sampled
 * orthogonal systems.
 */
export function eigenphase_histogram(n_systems: number, bins: number, seed: bigint): Uint32Array;

/**
 * One training trace as JSON: `{tokens: [{kind, pair | slot, system, x}], n_systems}`
 * where `kind` is `start | open | close | obs` and `x` is the 5-vector payload
 * (zeros on label tokens).
 */
export function interleaved_trace(n_systems: number, seed: bigint, family_name: string): string;

/**
 * Mean squared error of the pseudoinverse predictor at observation index
 * `1..=length`, averaged over `n_runs` random systems.
 */
export function pinv_error_curve(length: number, n_runs: number, seed: bigint, family_name: string): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly eigenphase_histogram: (a: number, b: number, c: bigint) => [number, number];
    readonly interleaved_trace: (a: number, b: bigint, c: number, d: number) => [number, number, number, number];
    readonly pinv_error_curve: (a: number, b: number, c: bigint, d: number, e: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
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
