/**
 * The scripting surface: one Session per rank, exposing the runtime's
 * operation set with the same keyword names (async_op, root, rcounts,
 * displs). Each backend owns a lane (an ordered async chain) so posted
 * operations execute one at a time in seq order while lanes of different
 * backends interleave freely.
 */

import {
  BackendFinalized,
  CommError,
  DuplicateBackend,
  NotInitialized,
  UnknownBackend,
  ValidationError,
} from "./errors.js";
import { BoundBuffer } from "./buffers.js";
import { CollectiveRequest, OpKind, ReduceOpName, runCollective } from "./collectives.js";
import { TuningTable, loadTable, messageBytes, route } from "./dispatch.js";
import { TcpTransport } from "./transport.js";
import { KIND_P2P } from "./wire.js";
import { LengthMismatch, OrderMismatch } from "./errors.js";

export const AUTO = "auto";

export interface SessionOptions {
  backends: string[];
  rank?: number;
  world_size?: number;
  master_addr?: string;
  master_port?: number;
  timeout_ms?: number;
  tuning_table?: string;
}

export interface OpOptions {
  async_op?: boolean;
}

export interface ReduceOptions extends OpOptions {
  op?: ReduceOpName;
}

export class WorkHandle {
  private settled = false;
  error: CommError | null = null;
  readonly done: Promise<void>;

  constructor(public backend: string, run: Promise<void>) {
    this.done = run.then(
      () => {
        this.settled = true;
      },
      (err) => {
        this.settled = true;
        this.error = err instanceof CommError ? err : new CommError(String(err));
        throw this.error;
      },
    );
    // Waiting is optional for fire-and-forget callers.
    this.done.catch(() => {});
  }

  async wait(): Promise<void> {
    await this.done;
  }

  test(): boolean {
    return this.settled;
  }
}

interface BackendState {
  name: string;
  transport: TcpTransport;
  lane: Promise<unknown>;
  seq: number;
  finalized: boolean;
}

function env(name: string): string | undefined {
  return process.env[name];
}

export class Session {
  private backends = new Map<string, BackendState>();
  private tuningTable: TuningTable | null = null;

  private constructor(
    public rank: number,
    public world_size: number,
    private timeoutMs: number,
  ) {}

  /** Bootstrap every named backend and return the ready session. Reads
   * MCRDL_RANK / MCRDL_WORLD_SIZE / MCRDL_MASTER_ADDR / MCRDL_MASTER_PORT
   * when options are omitted. Backend k uses master_port + k. */
  static async init(options: SessionOptions): Promise<Session> {
    const rank = options.rank ?? Number(env("MCRDL_RANK") ?? 0);
    const worldSize = options.world_size ?? Number(env("MCRDL_WORLD_SIZE") ?? 1);
    const masterAddr = options.master_addr ?? env("MCRDL_MASTER_ADDR") ?? "127.0.0.1";
    const masterPort = options.master_port ?? Number(env("MCRDL_MASTER_PORT") ?? 0);
    const timeoutMs = options.timeout_ms ?? Number(env("MCRDL_TIMEOUT_SECS") ?? 30) * 1000;
    const session = new Session(rank, worldSize, timeoutMs);
    const names = new Set(options.backends);
    if (names.size !== options.backends.length) {
      throw new DuplicateBackend(`duplicate backend ids in ${options.backends}`);
    }
    for (const [index, name] of options.backends.entries()) {
      if (name === AUTO) throw new ValidationError("backend", '"auto" is reserved');
      const transport = await TcpTransport.create(
        rank,
        worldSize,
        masterAddr,
        masterPort + index,
        timeoutMs,
      );
      session.backends.set(name, {
        name,
        transport,
        lane: Promise.resolve(),
        seq: 0,
        finalized: false,
      });
    }
    const tablePath = options.tuning_table ?? env("MCRDL_TUNING_TABLE");
    if (tablePath) session.tuningTable = loadTable(tablePath);
    return session;
  }

  set_tuning_table(table: TuningTable | null): void {
    this.tuningTable = table;
  }

  get_backends(): string[] {
    return [...this.backends.keys()];
  }

  private state(backend: string): BackendState {
    if (this.backends.size === 0) throw new NotInitialized("call init() before posting");
    const state = this.backends.get(backend);
    if (!state) throw new UnknownBackend(`backend ${backend} is not registered`);
    return state;
  }

  get_rank(backend: string): number {
    this.state(backend);
    return this.rank;
  }

  get_size(backend: string): number {
    this.state(backend);
    return this.world_size;
  }

  private resolveBackend(req: CollectiveRequest, backend: string): string {
    if (backend !== AUTO) return backend;
    return route(
      this.tuningTable,
      req.kind,
      this.world_size,
      messageBytes(req, this.world_size),
      this.get_backends(),
    );
  }

  private post(
    backend: string,
    req: Omit<CollectiveRequest, "seq">,
    options: OpOptions,
    body?: (state: BackendState, seq: number) => Promise<void>,
  ): Promise<WorkHandle> {
    let state: BackendState;
    let name: string;
    try {
      name = this.resolveBackend({ ...req, seq: 0 }, backend);
      state = this.state(name);
      if (state.finalized) throw new BackendFinalized(`backend ${name} is finalized`);
      validateRequest(req, this.world_size);
    } catch (err) {
      return Promise.reject(err);
    }
    const seq = state.seq++;
    const run = state.lane.then(() =>
      body
        ? body(state, seq)
        : runCollective(state.transport, this.rank, this.world_size, { ...req, seq }, this.timeoutMs),
    );
    state.lane = run.catch(() => {});
    const handle = new WorkHandle(name, run);
    if (options.async_op) return Promise.resolve(handle);
    return handle.done.then(() => handle);
  }

  send(backend: string, buffer: BoundBuffer, peer: number, options: OpOptions = {}) {
    return this.post(backend, { kind: "send", input: buffer, root: peer }, options,
      async (state, seq) => {
        await state.transport.send(peer, buffer.toBytes(), KIND_P2P, seq);
      });
  }

  recv(backend: string, buffer: BoundBuffer, peer: number, options: OpOptions = {}) {
    return this.post(backend, { kind: "recv", output: buffer, root: peer }, options,
      async (state) => {
        const frame = await state.transport.recv(peer, this.timeoutMs);
        if (frame.kind !== KIND_P2P) {
          throw new OrderMismatch(`expected payload frame from rank ${peer}`);
        }
        if (frame.payload.length !== buffer.nbytes) {
          throw new LengthMismatch(
            `expected ${buffer.nbytes} bytes, got ${frame.payload.length}`,
          );
        }
        buffer.writeBytes(frame.payload);
      });
  }

  all_reduce(backend: string, buffer: BoundBuffer, options: ReduceOptions = {}) {
    return this.post(
      backend,
      { kind: "all_reduce", input: buffer, output: buffer, op: options.op ?? "sum" },
      options,
    );
  }

  reduce(backend: string, buffer: BoundBuffer, root: number, options: ReduceOptions = {}) {
    return this.post(
      backend,
      { kind: "reduce", input: buffer, output: buffer, root, op: options.op ?? "sum" },
      options,
    );
  }

  bcast(backend: string, buffer: BoundBuffer, root: number, options: OpOptions = {}) {
    return this.post(backend, { kind: "bcast", output: buffer, root }, options);
  }

  all_gather(backend: string, output: BoundBuffer, input: BoundBuffer, options: OpOptions = {}) {
    return this.post(backend, { kind: "all_gather", input, output }, options);
  }

  all_gatherv(
    backend: string,
    output: BoundBuffer,
    input: BoundBuffer,
    rcounts: number[],
    displs: number[],
    options: OpOptions = {},
  ) {
    return this.post(
      backend,
      { kind: "all_gatherv", input, output, rcounts, rdispls: displs },
      options,
    );
  }

  gather(
    backend: string,
    output: BoundBuffer | null,
    input: BoundBuffer,
    root: number,
    options: OpOptions = {},
  ) {
    return this.post(
      backend,
      { kind: "gather", input, output: output ?? undefined, root },
      options,
    );
  }

  gatherv(
    backend: string,
    output: BoundBuffer | null,
    input: BoundBuffer,
    root: number,
    rcounts: number[],
    displs: number[],
    options: OpOptions = {},
  ) {
    return this.post(
      backend,
      { kind: "gatherv", input, output: output ?? undefined, root, rcounts, rdispls: displs },
      options,
    );
  }

  scatter(
    backend: string,
    output: BoundBuffer,
    input: BoundBuffer | null,
    root: number,
    options: OpOptions = {},
  ) {
    return this.post(
      backend,
      { kind: "scatter", input: input ?? undefined, output, root },
      options,
    );
  }

  scatterv(
    backend: string,
    output: BoundBuffer,
    input: BoundBuffer | null,
    root: number,
    scounts: number[],
    displs: number[],
    options: OpOptions = {},
  ) {
    return this.post(
      backend,
      { kind: "scatterv", input: input ?? undefined, output, root, scounts, sdispls: displs },
      options,
    );
  }

  reduce_scatter(
    backend: string,
    output: BoundBuffer,
    input: BoundBuffer,
    options: ReduceOptions = {},
  ) {
    return this.post(
      backend,
      { kind: "reduce_scatter", input, output, op: options.op ?? "sum" },
      options,
    );
  }

  all_to_all_single(
    backend: string,
    output: BoundBuffer,
    input: BoundBuffer,
    options: OpOptions = {},
  ) {
    return this.post(backend, { kind: "all_to_all_single", input, output }, options);
  }

  all_to_all(
    backend: string,
    outputs: BoundBuffer[],
    inputs: BoundBuffer[],
    options: OpOptions = {},
  ) {
    return this.post(backend, { kind: "all_to_all", input: inputs, output: outputs }, options);
  }

  all_to_allv(
    backend: string,
    output: BoundBuffer,
    input: BoundBuffer,
    scounts: number[],
    rcounts: number[],
    sdispls: number[],
    rdispls: number[],
    options: OpOptions = {},
  ) {
    return this.post(
      backend,
      { kind: "all_to_allv", input, output, scounts, rcounts, sdispls, rdispls },
      options,
    );
  }

  /** Drain the listed backends (registration order). */
  async synchronize(backends?: string[]): Promise<void> {
    const wanted = backends ?? this.get_backends();
    for (const name of wanted) this.state(name);
    const lanes = this.get_backends()
      .filter((n) => wanted.includes(n))
      .map((n) => this.backends.get(n)!.lane);
    await Promise.all(lanes);
  }

  async finalize(backends?: string[]): Promise<void> {
    const wanted = backends ?? this.get_backends();
    for (const name of wanted) {
      const state = this.state(name);
      await state.lane;
      state.finalized = true;
      await state.transport.close();
    }
  }
}

function validateRequest(req: Omit<CollectiveRequest, "seq">, p: number): void {
  const input = req.input as BoundBuffer | undefined;
  const output = req.output as BoundBuffer | undefined;
  const needRoot = ["bcast", "reduce", "gather", "gatherv", "scatter", "scatterv", "send", "recv"];
  if (needRoot.includes(req.kind)) {
    if (req.root === undefined) throw new ValidationError("root", "required for this kind");
    if (req.root < 0 || req.root >= p) {
      throw new ValidationError("root", `rank ${req.root} outside world ${p}`);
    }
  }
  switch (req.kind) {
    case "all_reduce":
    case "reduce":
      if (input!.count !== output!.count) {
        throw new ValidationError("output", `expected ${input!.count}, got ${output!.count}`);
      }
      break;
    case "all_gather":
      if (output!.count !== p * input!.count) {
        throw new ValidationError("output", `expected ${p * input!.count}`);
      }
      break;
    case "reduce_scatter":
      if (input!.count !== p * output!.count) {
        throw new ValidationError("input", `expected ${p * output!.count}`);
      }
      break;
    case "all_to_all_single":
      if (input!.count !== output!.count) {
        throw new ValidationError("output", `expected ${input!.count}`);
      }
      if (input!.count % p !== 0) {
        throw new ValidationError("input", `count ${input!.count} not divisible by ${p}`);
      }
      break;
    case "all_to_all":
      if ((req.input as BoundBuffer[]).length !== p || (req.output as BoundBuffer[]).length !== p) {
        throw new ValidationError("input", `expected a list of ${p} buffers`);
      }
      break;
    case "gatherv":
    case "all_gatherv":
      if (req.rcounts!.length !== p) {
        throw new ValidationError("rcounts", `expected ${p} entries`);
      }
      break;
    case "scatterv":
      if (req.scounts!.length !== p) {
        throw new ValidationError("scounts", `expected ${p} entries`);
      }
      break;
  }
}
