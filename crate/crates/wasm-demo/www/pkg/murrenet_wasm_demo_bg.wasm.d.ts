/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const hazard_curve: (a: number, b: number) => [number, number];
export const orthogonal_demo: (a: number, b: number, c: number, d: number) => [number, number];
export const stratify_demo: (a: number, b: number, c: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
