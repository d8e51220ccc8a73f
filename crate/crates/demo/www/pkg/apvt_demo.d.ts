/* tslint:disable */
/* eslint-disable */

export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * JSON [`Heatmap`].
     */
    attention(stage: number, block: number, path: number, head: number, row: number, col: number): string;
    /**
     * JSON list of four [`EnergyMap`]s.
     */
    energy(): string;
    /**
     * The 32×32 source image as RGBA bytes.
     */
    imageRgba(): Uint8Array;
    inputSize(): number;
    /**
     * Loads checkpoint bytes written by the command-line trainer.
     */
    loadCheckpoint(bytes: Uint8Array): void;
    constructor(variant: string, size: number, _class: number, seed: number);
}

/**
 * JSON [`AuditReport`] for the named variants plus a custom configuration.
 */
export function parameterAudit(depths: string, paths: number, head_dim: number, classes: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_attention: (a: number, b: number, c: number, d: number, e: number, f: number, g: number) => [number, number, number, number];
    readonly demo_energy: (a: number) => [number, number, number, number];
    readonly demo_imageRgba: (a: number) => [number, number];
    readonly demo_inputSize: (a: number) => number;
    readonly demo_loadCheckpoint: (a: number, b: number, c: number) => [number, number];
    readonly demo_new: (a: number, b: number, c: number, d: number, e: number) => [number, number, number];
    readonly parameterAudit: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
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
