import { describe, expect, it } from "vitest";

import {
  FRAME_HEADER_LEN,
  FrameParser,
  KIND_BOOTSTRAP,
  KIND_HEADER,
  packFrame,
  unpackFrameHeader,
} from "../src/wire.js";
import { BoundBuffer, bytesToElements } from "../src/buffers.js";

describe("wire format", () => {
  it("emits the 22-byte golden empty frame", () => {
    const frame = packFrame(0, 0, Buffer.alloc(0));
    expect(frame.length).toBe(FRAME_HEADER_LEN);
    expect(frame.length).toBe(22);
    const want = Buffer.concat([
      Buffer.from("MCDL", "ascii"),
      Buffer.from([1, 0]),
      Buffer.alloc(16),
    ]);
    expect(frame.equals(want)).toBe(true);
  });

  it("packs little-endian seq and length", () => {
    const frame = packFrame(KIND_BOOTSTRAP, 0x0102, Buffer.from("hi"));
    expect(frame.subarray(0, 4).toString("ascii")).toBe("MCDL");
    expect(frame[4]).toBe(1);
    expect(frame[5]).toBe(2);
    expect(frame.readBigUInt64LE(6)).toBe(0x0102n);
    expect(frame.readBigUInt64LE(14)).toBe(2n);
    expect(frame.subarray(22).toString()).toBe("hi");
  });

  it("round-trips headers", () => {
    const raw = packFrame(KIND_HEADER, 7, Buffer.from("xxxxx"));
    const head = unpackFrameHeader(raw.subarray(0, FRAME_HEADER_LEN));
    expect(head).toEqual({ kind: KIND_HEADER, seq: 7, payloadLen: 5 });
  });

  it("rejects bad magic", () => {
    const raw = Buffer.from(packFrame(0, 0, Buffer.alloc(0)));
    raw[0] = "X".charCodeAt(0);
    expect(() => unpackFrameHeader(raw)).toThrowError(/magic/);
  });

  it("reassembles frames across arbitrary chunk splits", () => {
    const frames = [
      packFrame(0, 1, Buffer.from([1, 2, 3])),
      packFrame(1, 2, Buffer.alloc(0)),
      packFrame(2, 3, Buffer.from("payload")),
    ];
    const stream = Buffer.concat(frames);
    for (const chunkSize of [1, 5, 22, 1000]) {
      const parser = new FrameParser();
      const got: number[] = [];
      for (let off = 0; off < stream.length; off += chunkSize) {
        for (const frame of parser.push(stream.subarray(off, off + chunkSize))) {
          got.push(frame.seq);
        }
      }
      expect(got).toEqual([1, 2, 3]);
    }
  });
});

describe("bound buffers", () => {
  it("round-trips dtype and count exactly", () => {
    const buf = BoundBuffer.fromValues("i64", [1, -2, 3]);
    expect(buf.count).toBe(3);
    expect(buf.nbytes).toBe(24);
    const back = bytesToElements("i64", buf.toBytes());
    expect(Array.from(back as BigInt64Array)).toEqual([1n, -2n, 3n]);
  });

  it("encodes f32 little-endian", () => {
    const buf = BoundBuffer.fromValues("f32", [1.0]);
    expect(Array.from(buf.toBytes())).toEqual([0, 0, 0x80, 0x3f]);
  });
});
