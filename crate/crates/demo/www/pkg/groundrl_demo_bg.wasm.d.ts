/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const score_context: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number];
export const sweep_gradient: (a: number, b: number, c: number, d: number, e: number) => [number, number];
export const train_modes: (a: number, b: number, c: number, d: bigint) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
