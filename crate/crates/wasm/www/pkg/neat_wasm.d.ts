/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Runs offline adaptation on the gallery captions, keeping the result.
     */
    adapt(epochs: number, learning_rate: number): string;
    /**
     * Concept names, as a JSON array.
     */
    concepts(): string;
    /**
     * Generates a world and pretrains the encoder; takes a few seconds.
     */
    constructor(seed: number);
    /**
     * Top scenes for `caption` under plain and negation-separated similarity.
     */
    rank(caption: string, alpha: number): string;
    /**
     * Restores the pretrained layer norms.
     */
    reset(): void;
}

export function decompose(caption: string): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly decompose: (a: number, b: number) => [number, number, number, number];
    readonly demo_adapt: (a: number, b: number, c: number) => [number, number, number, number];
    readonly demo_concepts: (a: number) => [number, number];
    readonly demo_new: (a: number) => [number, number, number];
    readonly demo_rank: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demo_reset: (a: number) => void;
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
