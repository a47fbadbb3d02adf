/**
 * Wire frame codec, bit-exact with the runtime:
 *
 *   magic   4 bytes "MCDL"
 *   version u8      1
 *   kind    u8      0 = p2p payload, 1 = collective header, 2 = bootstrap
 *   seq     u64 LE
 *   len     u64 LE
 *   payload len bytes
 */

import { LengthMismatch } from "./errors.js";

export const FRAME_MAGIC = Buffer.from("MCDL", "ascii");
export const FRAME_VERSION = 1;
export const KIND_P2P = 0;
export const KIND_HEADER = 1;
export const KIND_BOOTSTRAP = 2;
export const FRAME_HEADER_LEN = 22;

export interface Frame {
  kind: number;
  seq: number;
  payload: Buffer;
}

export function packFrame(kind: number, seq: number, payload: Buffer): Buffer {
  const head = Buffer.alloc(FRAME_HEADER_LEN);
  FRAME_MAGIC.copy(head, 0);
  head.writeUInt8(FRAME_VERSION, 4);
  head.writeUInt8(kind, 5);
  head.writeBigUInt64LE(BigInt(seq), 6);
  head.writeBigUInt64LE(BigInt(payload.length), 14);
  return Buffer.concat([head, payload]);
}

export function unpackFrameHeader(head: Buffer): { kind: number; seq: number; payloadLen: number } {
  if (!head.subarray(0, 4).equals(FRAME_MAGIC)) {
    throw new LengthMismatch(`bad frame magic ${head.subarray(0, 4).toString("hex")}`);
  }
  if (head.readUInt8(4) !== FRAME_VERSION) {
    throw new LengthMismatch(`unsupported frame version ${head.readUInt8(4)}`);
  }
  return {
    kind: head.readUInt8(5),
    seq: Number(head.readBigUInt64LE(6)),
    payloadLen: Number(head.readBigUInt64LE(14)),
  };
}

/** Incremental parser feeding complete frames out of a byte stream. */
export class FrameParser {
  private chunks: Buffer[] = [];
  private buffered = 0;

  push(chunk: Buffer): Frame[] {
    this.chunks.push(chunk);
    this.buffered += chunk.length;
    const frames: Frame[] = [];
    for (;;) {
      if (this.buffered < FRAME_HEADER_LEN) break;
      const whole = this.chunks.length === 1 ? this.chunks[0] : Buffer.concat(this.chunks);
      this.chunks = [whole];
      const { kind, seq, payloadLen } = unpackFrameHeader(whole.subarray(0, FRAME_HEADER_LEN));
      const total = FRAME_HEADER_LEN + payloadLen;
      if (whole.length < total) break;
      frames.push({ kind, seq, payload: Buffer.from(whole.subarray(FRAME_HEADER_LEN, total)) });
      const rest = whole.subarray(total);
      this.chunks = rest.length ? [Buffer.from(rest)] : [];
      this.buffered = rest.length;
    }
    return frames;
  }
}
