/* tslint:disable */
/* eslint-disable */

export class Solution {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    choices: Uint32Array;
    posteriors: Float64Array;
    svg: string;
    value: number;
    weights: Float64Array;
}

export class Support {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    svg: string;
    /**
     * Probability of the first state at each tangent posterior.
     */
    tangency: Float64Array;
    value: number;
}

export function choice_curve(gumbel_scale: number, log_sd: number, points: number, draws: number): Float64Array;

export function solve(values: Float64Array, disturbance: Float64Array, prior: number, cost: string, kappa: number): Solution;

export function support(values: Float64Array, disturbance: Float64Array, prior: number, cost: string, kappa: number, slope: number): Support;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_get_solution_choices: (a: number) => [number, number];
    readonly __wbg_get_solution_posteriors: (a: number) => [number, number];
    readonly __wbg_get_solution_svg: (a: number) => [number, number];
    readonly __wbg_get_solution_value: (a: number) => number;
    readonly __wbg_get_solution_weights: (a: number) => [number, number];
    readonly __wbg_get_support_svg: (a: number) => [number, number];
    readonly __wbg_get_support_tangency: (a: number) => [number, number];
    readonly __wbg_get_support_value: (a: number) => number;
    readonly __wbg_set_solution_choices: (a: number, b: number, c: number) => void;
    readonly __wbg_set_solution_posteriors: (a: number, b: number, c: number) => void;
    readonly __wbg_set_solution_svg: (a: number, b: number, c: number) => void;
    readonly __wbg_set_solution_value: (a: number, b: number) => void;
    readonly __wbg_set_solution_weights: (a: number, b: number, c: number) => void;
    readonly __wbg_set_support_svg: (a: number, b: number, c: number) => void;
    readonly __wbg_set_support_tangency: (a: number, b: number, c: number) => void;
    readonly __wbg_set_support_value: (a: number, b: number) => void;
    readonly __wbg_solution_free: (a: number, b: number) => void;
    readonly __wbg_support_free: (a: number, b: number) => void;
    readonly choice_curve: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly solve: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number) => [number, number, number];
    readonly support: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number) => [number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
