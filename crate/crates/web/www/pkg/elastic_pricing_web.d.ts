/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Score of one test customer along the coefficient range and the
     * individually optimal coefficient at conversion weight `lambda`.
     */
    customer_profile(index: number, lambda: number, a: number, b: number): string;
    /**
     * Generates `n` synthetic quotes and fits the demand model on the train split.
     */
    constructor(n: number, seed: bigint, elasticity: number);
    summary(): string;
    /**
     * Mean predicted conversion when all historical prices rise by
     * `0, max/steps, ..., max`.
     */
    uplift_curve(max: number, steps: number): string;
}

/**
 * RDC, neural HGR and Pearson on a generated pair `y = shape(x) + noise·z`,
 * with `shape` one of `linear`, `quadratic`, `sine` or `independent`.
 */
export function dependence(shape: string, n: number, noise: number, seed: bigint): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_customer_profile: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly demo_new: (a: number, b: bigint, c: number) => [number, number, number];
    readonly demo_summary: (a: number) => [number, number, number, number];
    readonly demo_uplift_curve: (a: number, b: number, c: number) => [number, number, number, number];
    readonly dependence: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
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
