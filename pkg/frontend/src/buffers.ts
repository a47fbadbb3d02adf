/**
 * BoundBuffer: adapter between native typed arrays and the runtime's
 * element-typed byte payloads (little-endian, matching the wire).
 */

import { ValidationError } from "./errors.js";

export type DTypeName = "f32" | "f64" | "i32" | "i64" | "u8";

export type ElementArray =
  | Float32Array
  | Float64Array
  | Int32Array
  | BigInt64Array
  | Uint8Array;

export const DTYPE_SIZE: Record<DTypeName, number> = {
  f32: 4,
  f64: 8,
  i32: 4,
  i64: 8,
  u8: 1,
};

const CTORS: Record<DTypeName, new (n: number) => ElementArray> = {
  f32: Float32Array,
  f64: Float64Array,
  i32: Int32Array,
  i64: BigInt64Array,
  u8: Uint8Array,
};

export class BoundBuffer {
  constructor(public dtype: DTypeName, public data: ElementArray) {
    const want = CTORS[dtype];
    if (!(data instanceof want)) {
      throw new ValidationError("buffer", `${dtype} expects ${want.name}`);
    }
  }

  get count(): number {
    return this.data.length;
  }

  get nbytes(): number {
    return this.count * DTYPE_SIZE[this.dtype];
  }

  static zeros(dtype: DTypeName, count: number): BoundBuffer {
    return new BoundBuffer(dtype, new CTORS[dtype](count));
  }

  static fromValues(dtype: DTypeName, values: number[]): BoundBuffer {
    const buf = BoundBuffer.zeros(dtype, values.length);
    if (dtype === "i64") {
      (buf.data as BigInt64Array).set(values.map((v) => BigInt(Math.trunc(v))));
    } else {
      (buf.data as Exclude<ElementArray, BigInt64Array>).set(values);
    }
    return buf;
  }

  toBytes(): Buffer {
    return Buffer.from(this.data.buffer, this.data.byteOffset, this.nbytes);
  }

  writeBytes(raw: Buffer): void {
    if (raw.length !== this.nbytes) {
      throw new ValidationError("buffer", `expected ${this.nbytes} bytes, got ${raw.length}`);
    }
    Buffer.from(this.data.buffer, this.data.byteOffset, this.nbytes).set(raw);
  }

  slice(offset: number, count: number): ElementArray {
    return this.data.subarray(offset, offset + count) as ElementArray;
  }

  toNumbers(): number[] {
    if (this.dtype === "i64") {
      return Array.from(this.data as BigInt64Array, (v) => Number(v));
    }
    return Array.from(this.data as Exclude<ElementArray, BigInt64Array>);
  }
}

/** Raw little-endian bytes -> a fresh element array of the dtype. */
export function bytesToElements(dtype: DTypeName, raw: Buffer): ElementArray {
  const count = raw.length / DTYPE_SIZE[dtype];
  const out = new CTORS[dtype](count);
  Buffer.from(out.buffer, 0, raw.length).set(raw);
  return out;
}

export function elementsToBytes(arr: ElementArray): Buffer {
  return Buffer.from(arr.buffer, arr.byteOffset, arr.byteLength);
}
