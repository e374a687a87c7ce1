/* tslint:disable */
/* eslint-disable */

/**
 * Survival curve and risk score for per-bin hazards.
 */
export function hazard_curve(hazards: Float64Array): string;

/**
 * Splits a token into its part along the common vector and the residual.
 */
export function orthogonal_demo(token: Float64Array, common: Float64Array): string;

/**
 * Trains the baseline on 70% of a fresh synthetic cohort and splits the
 * rest at the median predicted risk.
 */
export function stratify_demo(seed: number, signal: number, epochs: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly hazard_curve: (a: number, b: number) => [number, number];
    readonly orthogonal_demo: (a: number, b: number, c: number, d: number) => [number, number];
    readonly stratify_demo: (a: number, b: number, c: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
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
