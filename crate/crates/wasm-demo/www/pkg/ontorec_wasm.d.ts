/* tslint:disable */
/* eslint-disable */

/**
 * Damped mean of the given ratings against `prior` for k = 0..=k_max.
 */
export function damped_mean_curve(ratings_json: string, prior: number, k_max: number): string;

/**
 * High-level interest classes in the order the selection vector uses.
 */
export function hl_classes(): string;

/**
 * Cold-start content recommendations for a new user who ticked the given
 * high-level classes (JSON array of labels).
 */
export function recommend_for_selection(selection_json: string, n: number): string;

/**
 * Willingness to repeat an item of `class` after 0..=days_max days.
 */
export function willingness_curve(_class: string, days_max: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly damped_mean_curve: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly hl_classes: () => [number, number, number, number];
    readonly recommend_for_selection: (a: number, b: number, c: number) => [number, number, number, number];
    readonly willingness_curve: (a: number, b: number, c: number) => [number, number, number, number];
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
