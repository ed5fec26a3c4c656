/* tslint:disable */
/* eslint-disable */

/**
 * An RGBA raster ready for `ImageData`.
 */
export class Raster {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    readonly height: number;
    readonly rgba: Uint8Array;
    /**
     * Mask rasters: number of valid cells. Scene rasters: vehicle cells.
     */
    readonly valid: number;
    readonly width: number;
}

export function gruTrace(weights: Float64Array, inputs: Float64Array): Float64Array;

export function maskRaster(cameras: number, fov_deg: number, depth_max: number, epsilon: number): Raster;

export function sceneBev(seed: number, frame: number): Raster;

export function sceneCameras(seed: number, frame: number): Raster;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_raster_free: (a: number, b: number) => void;
    readonly gruTrace: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly maskRaster: (a: number, b: number, c: number, d: number) => [number, number, number];
    readonly raster_height: (a: number) => number;
    readonly raster_rgba: (a: number) => [number, number];
    readonly raster_valid: (a: number) => number;
    readonly raster_width: (a: number) => number;
    readonly sceneBev: (a: number, b: number) => [number, number, number];
    readonly sceneCameras: (a: number, b: number) => [number, number, number];
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
