/**
 * Collective execution over point-to-point frames, wire-compatible with
 * the runtime's "naive" algorithm family: every reduction folds in
 * ascending rank order (bit-identical to a sequential fold), rooted ops
 * are linear, and every collective is preceded by the header-agreement
 * star through rank 0.
 */

import {
  CodecMismatch,
  CommError,
  OrderMismatch,
  LengthMismatch,
  ValidationError,
} from "./errors.js";
import {
  BoundBuffer,
  DTYPE_SIZE,
  DTypeName,
  ElementArray,
  bytesToElements,
  elementsToBytes,
} from "./buffers.js";
import { TcpTransport } from "./transport.js";
import { KIND_HEADER, KIND_P2P } from "./wire.js";

export type OpKind =
  | "send"
  | "recv"
  | "bcast"
  | "reduce"
  | "all_reduce"
  | "gather"
  | "gatherv"
  | "scatter"
  | "scatterv"
  | "all_gather"
  | "all_gatherv"
  | "reduce_scatter"
  | "all_to_all_single"
  | "all_to_all"
  | "all_to_allv";

export type ReduceOpName = "sum" | "prod" | "min" | "max";

export interface CollectiveRequest {
  kind: OpKind;
  seq: number;
  input?: BoundBuffer | BoundBuffer[];
  output?: BoundBuffer | BoundBuffer[];
  root?: number;
  op?: ReduceOpName;
  scounts?: number[];
  rcounts?: number[];
  sdispls?: number[];
  rdispls?: number[];
}

function froundIf(dtype: DTypeName, x: number): number {
  return dtype === "f32" ? Math.fround(x) : x;
}

/** Elementwise reduce of b into a (ascending fold order is the caller's
 * job); matches the runtime's integer wrap and IEEE float semantics. */
export function applyReduce(
  dtype: DTypeName,
  op: ReduceOpName,
  acc: ElementArray,
  other: ElementArray,
): void {
  if (dtype === "i64") {
    const a = acc as BigInt64Array;
    const b = other as BigInt64Array;
    for (let i = 0; i < a.length; i++) {
      if (op === "sum") a[i] = BigInt.asIntN(64, a[i] + b[i]);
      else if (op === "prod") a[i] = BigInt.asIntN(64, a[i] * b[i]);
      else if (op === "min") a[i] = a[i] < b[i] ? a[i] : b[i];
      else a[i] = a[i] > b[i] ? a[i] : b[i];
    }
    return;
  }
  const a = acc as Exclude<ElementArray, BigInt64Array>;
  const b = other as Exclude<ElementArray, BigInt64Array>;
  for (let i = 0; i < a.length; i++) {
    if (op === "sum") a[i] = froundIf(dtype, a[i] + b[i]);
    else if (op === "prod") a[i] = froundIf(dtype, a[i] * b[i]);
    else if (op === "min") a[i] = Math.min(a[i], b[i]);
    else a[i] = Math.max(a[i], b[i]);
  }
}

class Comm {
  constructor(
    private transport: TcpTransport,
    private seq: number,
    private dtype: DTypeName,
    private timeoutMs: number,
  ) {}

  async sendBlock(dst: number, arr: ElementArray): Promise<void> {
    if (arr.length === 0) return;
    await this.transport.send(dst, elementsToBytes(arr), KIND_P2P, this.seq);
  }

  async recvBlock(src: number, count: number): Promise<ElementArray> {
    if (count === 0) return bytesToElements(this.dtype, Buffer.alloc(0));
    const frame = await this.transport.recv(src, this.timeoutMs);
    if (frame.kind !== KIND_P2P) {
      throw new OrderMismatch(`expected payload frame from rank ${src}, got kind ${frame.kind}`);
    }
    const expected = count * DTYPE_SIZE[this.dtype];
    if (frame.payload.length !== expected) {
      throw new LengthMismatch(
        `expected ${expected} bytes from rank ${src}, got ${frame.payload.length}`,
      );
    }
    return bytesToElements(this.dtype, frame.payload);
  }
}

function firstBuffer(req: CollectiveRequest): BoundBuffer | undefined {
  for (const side of [req.input, req.output]) {
    if (side instanceof BoundBuffer) return side;
    if (Array.isArray(side) && side.length) return side[0];
  }
  return undefined;
}

function signature(req: CollectiveRequest): Record<string, unknown> {
  const sig: Record<string, unknown> = {
    op: req.kind,
    seq: req.seq,
    codec: null,
    dtype: firstBuffer(req)?.dtype ?? null,
  };
  if (req.root !== undefined) sig.root = req.root;
  if (req.op !== undefined) sig.rop = req.op;
  switch (req.kind) {
    case "gatherv":
    case "all_gatherv":
      sig.counts = req.rcounts;
      break;
    case "scatterv":
      sig.counts = req.scounts;
      break;
    case "all_to_allv":
      sig.scounts = req.scounts;
      sig.rcounts = req.rcounts;
      break;
    case "all_to_all":
      sig.scounts = (req.input as BoundBuffer[]).map((b) => b.count);
      sig.rcounts = (req.output as BoundBuffer[]).map((b) => b.count);
      break;
    case "reduce":
    case "all_reduce":
    case "all_gather":
    case "gather":
    case "all_to_all_single":
      sig.count = (req.input as BoundBuffer).count;
      break;
    case "bcast":
    case "scatter":
    case "reduce_scatter":
      sig.count = (req.output as BoundBuffer).count;
      break;
  }
  return sig;
}

function crossCheck(sigs: Record<string, unknown>[], p: number): { code: string; error: string } | null {
  const fields = ["op", "seq", "dtype", "root", "rop", "count", "counts"];
  for (const field of fields) {
    const first = JSON.stringify(sigs[0][field] ?? null);
    for (let i = 1; i < p; i++) {
      if (JSON.stringify(sigs[i][field] ?? null) !== first) {
        const values = sigs.map((s, r) => `r${r}=${JSON.stringify(s[field] ?? null)}`);
        return { code: "order", error: `ranks disagree on ${field}: ${values.join(", ")}` };
      }
    }
  }
  const codecs = sigs.map((s) => s.codec ?? null);
  if (codecs.some((c) => JSON.stringify(c) !== JSON.stringify(codecs[0]))) {
    return { code: "codec", error: `ranks disagree on codec: ${JSON.stringify(codecs)}` };
  }
  if (sigs[0].scounts !== undefined) {
    const sc = sigs.map((s) => s.scounts as number[]);
    const rc = sigs.map((s) => s.rcounts as number[]);
    for (let i = 0; i < p; i++) {
      for (let j = 0; j < p; j++) {
        if (sc[i][j] !== rc[j][i]) {
          return {
            code: "order",
            error: `pairwise count disagreement: rank ${i} sends ${sc[i][j]} to rank ${j}, which expects ${rc[j][i]}`,
          };
        }
      }
    }
  }
  return null;
}

async function agreeHeader(
  transport: TcpTransport,
  rank: number,
  p: number,
  req: CollectiveRequest,
  timeoutMs: number,
): Promise<void> {
  if (p === 1) return;
  const sig = signature(req);
  let verdict: { ok: boolean; code?: string; error?: string };
  if (rank !== 0) {
    await transport.send(0, Buffer.from(JSON.stringify(sig)), KIND_HEADER, req.seq);
    const frame = await transport.recv(0, timeoutMs);
    if (frame.kind !== KIND_HEADER) {
      throw new OrderMismatch(`expected verdict frame from rank 0, got kind ${frame.kind}`);
    }
    verdict = JSON.parse(frame.payload.toString());
  } else {
    const sigs: Record<string, unknown>[] = [sig];
    let failure: { code: string; error: string } | null = null;
    for (let src = 1; src < p; src++) {
      const frame = await transport.recv(src, timeoutMs);
      if (frame.kind !== KIND_HEADER) {
        failure = failure ?? {
          code: "order",
          error: `expected header frame from rank ${src}, got kind ${frame.kind}`,
        };
        sigs.push({});
        continue;
      }
      sigs.push(JSON.parse(frame.payload.toString()));
    }
    failure = failure ?? crossCheck(sigs, p);
    verdict = failure === null ? { ok: true } : { ok: false, ...failure };
    const raw = Buffer.from(JSON.stringify(verdict));
    for (let dst = 1; dst < p; dst++) {
      await transport.send(dst, raw, KIND_HEADER, req.seq);
    }
  }
  if (!verdict.ok) {
    const message = verdict.error ?? "order mismatch";
    throw verdict.code === "codec" ? new CodecMismatch(message) : new OrderMismatch(message);
  }
}

function uniformCounts(n: number, p: number): { counts: number[]; displs: number[] } {
  const counts = Array(p).fill(n);
  const displs = Array.from({ length: p }, (_, i) => i * n);
  return { counts, displs };
}

export async function runCollective(
  transport: TcpTransport,
  rank: number,
  p: number,
  req: CollectiveRequest,
  timeoutMs: number,
): Promise<void> {
  const dtype = firstBuffer(req)?.dtype;
  if (dtype === undefined) throw new ValidationError("buffer", "request carries no buffers");
  await agreeHeader(transport, rank, p, req, timeoutMs);
  const comm = new Comm(transport, req.seq, dtype, timeoutMs);
  const input = req.input as BoundBuffer | undefined;
  const output = req.output as BoundBuffer | undefined;
  const op = req.op as ReduceOpName;
  const root = req.root as number;

  switch (req.kind) {
    case "all_reduce": {
      const n = input!.count;
      const acc = input!.data.slice(0) as ElementArray;
      if (p > 1) {
        if (rank === 0) {
          for (let src = 1; src < p; src++) {
            applyReduce(dtype, op, acc, await comm.recvBlock(src, n));
          }
          for (let dst = 1; dst < p; dst++) await comm.sendBlock(dst, acc);
        } else {
          await comm.sendBlock(0, input!.data);
          acc.set((await comm.recvBlock(0, n)) as never);
        }
      }
      output!.data.set(acc as never);
      return;
    }
    case "reduce": {
      const n = input!.count;
      if (rank !== root) {
        await comm.sendBlock(root, input!.data);
        return;
      }
      let acc: ElementArray | null = null;
      for (let src = 0; src < p; src++) {
        const contrib = src === rank ? input!.data : await comm.recvBlock(src, n);
        if (acc === null) acc = contrib.slice(0) as ElementArray;
        else applyReduce(dtype, op, acc, contrib);
      }
      output!.data.set(acc! as never);
      return;
    }
    case "bcast": {
      if (rank === root) {
        for (let dst = 0; dst < p; dst++) {
          if (dst !== rank) await comm.sendBlock(dst, output!.data);
        }
      } else {
        const got = await comm.recvBlock(root, output!.count);
        output!.data.set(got as never);
      }
      return;
    }
    case "all_gather":
    case "all_gatherv": {
      const { counts, displs } =
        req.kind === "all_gather"
          ? uniformCounts(input!.count, p)
          : { counts: req.rcounts!, displs: req.rdispls! };
      for (let dst = 0; dst < p; dst++) {
        if (dst !== rank) await comm.sendBlock(dst, input!.data);
      }
      output!.data.set(input!.data as never, displs[rank]);
      for (let src = 0; src < p; src++) {
        if (src !== rank) {
          const block = await comm.recvBlock(src, counts[src]);
          output!.data.set(block as never, displs[src]);
        }
      }
      return;
    }
    case "gather":
    case "gatherv": {
      const { counts, displs } =
        req.kind === "gather"
          ? uniformCounts(input!.count, p)
          : { counts: req.rcounts!, displs: req.rdispls! };
      if (rank !== root) {
        await comm.sendBlock(root, input!.data);
        return;
      }
      for (let src = 0; src < p; src++) {
        const block = src === rank ? input!.data : await comm.recvBlock(src, counts[src]);
        output!.data.set(block as never, displs[src]);
      }
      return;
    }
    case "scatter":
    case "scatterv": {
      const { counts, displs } =
        req.kind === "scatter"
          ? uniformCounts(output!.count, p)
          : { counts: req.scounts!, displs: req.sdispls! };
      if (rank === root) {
        for (let dst = 0; dst < p; dst++) {
          const block = input!.slice(displs[dst], counts[dst]);
          if (dst === rank) output!.data.set(block as never);
          else await comm.sendBlock(dst, block);
        }
      } else {
        output!.data.set((await comm.recvBlock(root, counts[rank])) as never);
      }
      return;
    }
    case "reduce_scatter": {
      const n = input!.count;
      const m = output!.count;
      const acc = input!.data.slice(0) as ElementArray;
      if (p > 1) {
        if (rank === 0) {
          for (let src = 1; src < p; src++) {
            applyReduce(dtype, op, acc, await comm.recvBlock(src, n));
          }
          for (let dst = 1; dst < p; dst++) await comm.sendBlock(dst, acc);
        } else {
          await comm.sendBlock(0, input!.data);
          acc.set((await comm.recvBlock(0, n)) as never);
        }
      }
      output!.data.set(acc.subarray(rank * m, (rank + 1) * m) as never);
      return;
    }
    case "all_to_all_single":
    case "all_to_all":
    case "all_to_allv": {
      let inBlock: (j: number) => ElementArray;
      let outSet: (j: number, block: ElementArray) => void;
      let rcounts: number[];
      if (req.kind === "all_to_all") {
        const ins = req.input as BoundBuffer[];
        const outs = req.output as BoundBuffer[];
        rcounts = outs.map((b) => b.count);
        inBlock = (j) => ins[j].data;
        outSet = (j, block) => outs[j].data.set(block as never);
      } else if (req.kind === "all_to_allv") {
        rcounts = req.rcounts!;
        inBlock = (j) => input!.slice(req.sdispls![j], req.scounts![j]);
        outSet = (j, block) => output!.data.set(block as never, req.rdispls![j]);
      } else {
        const m = input!.count / p;
        rcounts = Array(p).fill(m);
        inBlock = (j) => input!.slice(j * m, m);
        outSet = (j, block) => output!.data.set(block as never, j * m);
      }
      const own = inBlock(rank).slice(0) as ElementArray;
      for (let dst = 0; dst < p; dst++) {
        if (dst !== rank) await comm.sendBlock(dst, inBlock(dst));
      }
      outSet(rank, own);
      for (let src = 0; src < p; src++) {
        if (src !== rank) outSet(src, await comm.recvBlock(src, rcounts[src]));
      }
      return;
    }
    default:
      throw new CommError(`unhandled kind ${req.kind}`);
  }
}
