/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_get_solution_choices: (a: number) => [number, number];
export const __wbg_get_solution_posteriors: (a: number) => [number, number];
export const __wbg_get_solution_svg: (a: number) => [number, number];
export const __wbg_get_solution_value: (a: number) => number;
export const __wbg_get_solution_weights: (a: number) => [number, number];
export const __wbg_get_support_svg: (a: number) => [number, number];
export const __wbg_get_support_tangency: (a: number) => [number, number];
export const __wbg_get_support_value: (a: number) => number;
export const __wbg_set_solution_choices: (a: number, b: number, c: number) => void;
export const __wbg_set_solution_posteriors: (a: number, b: number, c: number) => void;
export const __wbg_set_solution_svg: (a: number, b: number, c: number) => void;
export const __wbg_set_solution_value: (a: number, b: number) => void;
export const __wbg_set_solution_weights: (a: number, b: number, c: number) => void;
export const __wbg_set_support_svg: (a: number, b: number, c: number) => void;
export const __wbg_set_support_tangency: (a: number, b: number, c: number) => void;
export const __wbg_set_support_value: (a: number, b: number) => void;
export const __wbg_solution_free: (a: number, b: number) => void;
export const __wbg_support_free: (a: number, b: number) => void;
export const choice_curve: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const solve: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number];
export const support: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
