/* tslint:disable */
/* eslint-disable */

/**
 * Renders blobs centered on a `width x height` grid and separates them with
 * the graph cut. Returns `3 * width * height` values: the signed map, the
 * positive-side mask (0 or 1) and the boundary strength.
 */
export function cut_blobs(width: number, height: number, blobs: Float64Array): Float64Array;

/**
 * The dense `k x k` filter, row-major.
 */
export function filter_kernel(k: number, params: Float64Array): Float64Array;

/**
 * Valid-mode response of the filter to `image`. The output is
 * `(width - k + 1) x (height - k + 1)`, computed on the separable path;
 * the last element holds the largest deviation from the direct path.
 */
export function filter_response(image: Float64Array, width: number, height: number, k: number, params: Float64Array): Float64Array;

/**
 * Parameters after clamping into the admissible box of a `k x k` kernel.
 */
export function project_params(k: number, params: Float64Array): Float64Array;

/**
 * A grayscale shape of class `class` (0 to 5), row-major in `[0, 1]`.
 */
export function shape_image(seed: bigint, _class: number, width: number, height: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly cut_blobs: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly filter_kernel: (a: number, b: number, c: number) => [number, number, number, number];
    readonly filter_response: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly project_params: (a: number, b: number, c: number) => [number, number, number, number];
    readonly shape_image: (a: bigint, b: number, c: number, d: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
