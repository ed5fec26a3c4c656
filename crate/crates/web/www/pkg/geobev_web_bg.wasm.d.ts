/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_raster_free: (a: number, b: number) => void;
export const gruTrace: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const maskRaster: (a: number, b: number, c: number, d: number) => [number, number, number];
export const raster_height: (a: number) => number;
export const raster_rgba: (a: number) => [number, number];
export const raster_valid: (a: number) => number;
export const raster_width: (a: number) => number;
export const sceneBev: (a: number, b: number) => [number, number, number];
export const sceneCameras: (a: number, b: number) => [number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
