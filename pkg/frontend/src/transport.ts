/**
 * TCP transport speaking the runtime's wire protocol: star bootstrap via
 * the rank-0 master listener, then one lazily-dialed connection per
 * directed pair, frames delivered FIFO per source into local inboxes.
 */

import * as net from "node:net";

import {
  BootstrapTimeout,
  CommTimeout,
  InvalidDestination,
  PeerDisconnected,
  ValidationError,
} from "./errors.js";
import { Frame, FrameParser, KIND_BOOTSTRAP, KIND_P2P, packFrame } from "./wire.js";

export interface Endpoint {
  rank: number;
  address: string;
}

export interface AddressBook {
  world_size: number;
  endpoints: Endpoint[];
}

export function bookToJson(book: AddressBook): string {
  // Canonical form: compact separators, sorted keys (matches the runtime).
  const endpoints = book.endpoints
    .slice()
    .sort((a, b) => a.rank - b.rank)
    .map((e) => `{"address":${JSON.stringify(e.address)},"rank":${e.rank}}`);
  return `{"endpoints":[${endpoints.join(",")}],"world_size":${book.world_size}}`;
}

class Inbox {
  private frames: Frame[] = [];
  private waiters: Array<{
    resolve: (f: Frame) => void;
    reject: (e: Error) => void;
    timer?: NodeJS.Timeout;
  }> = [];
  private closed = false;
  private reason = "";

  put(frame: Frame): void {
    const waiter = this.waiters.shift();
    if (waiter) {
      if (waiter.timer) clearTimeout(waiter.timer);
      waiter.resolve(frame);
    } else {
      this.frames.push(frame);
    }
  }

  close(reason: string): void {
    this.closed = true;
    this.reason = reason;
    for (const waiter of this.waiters.splice(0)) {
      if (waiter.timer) clearTimeout(waiter.timer);
      waiter.reject(new PeerDisconnected(reason));
    }
  }

  take(timeoutMs: number): Promise<Frame> {
    const next = this.frames.shift();
    if (next) return Promise.resolve(next);
    if (this.closed) return Promise.reject(new PeerDisconnected(this.reason));
    return new Promise((resolve, reject) => {
      const waiter: (typeof this.waiters)[number] = { resolve, reject };
      waiter.timer = setTimeout(() => {
        const idx = this.waiters.indexOf(waiter);
        if (idx >= 0) this.waiters.splice(idx, 1);
        reject(new CommTimeout("timed out waiting for frame"));
      }, timeoutMs);
      this.waiters.push(waiter);
    });
  }
}

function hostPort(address: string): { host: string; port: number } {
  const i = address.lastIndexOf(":");
  if (i <= 0) throw new ValidationError("address", `expected host:port, got ${address}`);
  return { host: address.slice(0, i), port: Number(address.slice(i + 1)) };
}

function connectOnce(host: string, port: number): Promise<net.Socket> {
  return new Promise((resolve, reject) => {
    const sock = net.connect({ host, port });
    sock.once("connect", () => {
      sock.setNoDelay(true);
      resolve(sock);
    });
    sock.once("error", reject);
  });
}

async function connectRetry(
  host: string,
  port: number,
  deadline: number,
  backoffMs = 50,
): Promise<net.Socket> {
  for (;;) {
    try {
      return await connectOnce(host, port);
    } catch (err) {
      if (Date.now() > deadline) {
        throw new BootstrapTimeout(`cannot reach ${host}:${port}: ${err}`);
      }
      await new Promise((r) => setTimeout(r, backoffMs));
    }
  }
}

/** One frame from a socket (bootstrap handshakes only). */
function awaitFrame(sock: net.Socket, timeoutMs: number): Promise<Frame> {
  return new Promise((resolve, reject) => {
    const parser = new FrameParser();
    const timer = setTimeout(
      () => reject(new BootstrapTimeout("handshake frame timed out")),
      timeoutMs,
    );
    const onData = (chunk: Buffer) => {
      const frames = parser.push(chunk);
      if (frames.length > 0) {
        clearTimeout(timer);
        sock.off("data", onData);
        resolve(frames[0]);
      }
    };
    sock.on("data", onData);
    sock.once("error", (err) => {
      clearTimeout(timer);
      reject(new PeerDisconnected(String(err)));
    });
  });
}

export class TcpTransport {
  private inboxes = new Map<number, Inbox>();
  private outgoing = new Map<number, Promise<net.Socket>>();
  private listener!: net.Server;
  private closing = false;
  book!: AddressBook;

  private constructor(
    public rank: number,
    public worldSize: number,
    private timeoutMs: number,
  ) {
    for (let src = 0; src < worldSize; src++) {
      if (src !== rank) this.inboxes.set(src, new Inbox());
    }
  }

  static async create(
    rank: number,
    worldSize: number,
    masterAddr: string,
    masterPort: number,
    timeoutMs = 30_000,
    listenHost = "127.0.0.1",
  ): Promise<TcpTransport> {
    if (rank < 0 || rank >= worldSize) {
      throw new ValidationError("rank", `rank ${rank} outside world ${worldSize}`);
    }
    const transport = new TcpTransport(rank, worldSize, timeoutMs);
    const deadline = Date.now() + timeoutMs;

    // Data listener: peers dial in, identify with their first frame, then
    // stream payload frames. One parser covers the whole byte stream so
    // frames arriving in the same chunk as the ident are not lost.
    transport.listener = net.createServer((sock) => {
      sock.setNoDelay(true);
      const parser = new FrameParser();
      let inbox: Inbox | null = null;
      sock.on("data", (chunk) => {
        for (const frame of parser.push(chunk)) {
          if (inbox === null) {
            const src = JSON.parse(frame.payload.toString()).rank as number;
            inbox = transport.inboxes.get(src) ?? null;
            if (inbox === null) {
              sock.destroy();
              return;
            }
          } else {
            inbox.put(frame);
          }
        }
      });
      const onGone = () => inbox?.close("peer closed connection");
      sock.on("error", onGone);
      sock.on("close", onGone);
    });
    await new Promise<void>((resolve, reject) => {
      transport.listener.once("error", reject);
      transport.listener.listen(0, listenHost, resolve);
    });
    const dataPort = (transport.listener.address() as net.AddressInfo).port;

    // Master side: collect every rank's hello, broadcast the book.
    let master: net.Server | undefined;
    if (rank === 0) {
      const peers: net.Socket[] = [];
      const endpoints: Endpoint[] = [];
      let done!: () => void;
      const allReported = new Promise<void>((r) => (done = r));
      master = net.createServer((sock) => {
        awaitFrame(sock, timeoutMs)
          .then((hello) => {
            const doc = JSON.parse(hello.payload.toString());
            endpoints.push({ rank: doc.rank, address: `${doc.host}:${doc.port}` });
            peers.push(sock);
            if (endpoints.length === worldSize) done();
          })
          .catch(() => sock.destroy());
      });
      await new Promise<void>((resolve, reject) => {
        master!.once("error", reject);
        master!.listen(masterPort, masterAddr, resolve);
      });
      void allReported.then(() => {
        const book = bookToJson({ world_size: worldSize, endpoints });
        const frame = packFrame(KIND_BOOTSTRAP, 0, Buffer.from(book));
        for (const peer of peers) {
          peer.write(frame);
          peer.end();
        }
        master!.close();
      });
    }

    // Every rank (0 included) dials the master and reports its endpoint.
    const conn = await connectRetry(masterAddr, masterPort, deadline);
    const hello = JSON.stringify({ rank, host: listenHost, port: dataPort });
    conn.write(packFrame(KIND_BOOTSTRAP, rank, Buffer.from(hello)));
    const bookFrame = await awaitFrame(conn, timeoutMs);
    conn.destroy();
    transport.book = JSON.parse(bookFrame.payload.toString());
    transport.book.endpoints.sort((a, b) => a.rank - b.rank);
    return transport;
  }

  private checkPeer(peer: number): void {
    if (peer === this.rank) throw new InvalidDestination("peer must differ from own rank");
    if (peer < 0 || peer >= this.worldSize) {
      throw new InvalidDestination(`rank ${peer} outside world ${this.worldSize}`);
    }
  }

  private dial(dst: number): Promise<net.Socket> {
    let pending = this.outgoing.get(dst);
    if (!pending) {
      const { host, port } = hostPort(this.book.endpoints[dst].address);
      pending = connectRetry(host, port, Date.now() + this.timeoutMs, 100).then((sock) => {
        sock.write(packFrame(KIND_BOOTSTRAP, this.rank, Buffer.from(JSON.stringify({ rank: this.rank }))));
        return sock;
      });
      this.outgoing.set(dst, pending);
    }
    return pending;
  }

  async send(dst: number, payload: Buffer, kind = KIND_P2P, seq = 0): Promise<void> {
    this.checkPeer(dst);
    const sock = await this.dial(dst);
    await new Promise<void>((resolve, reject) => {
      sock.write(packFrame(kind, seq, payload), (err) => (err ? reject(new PeerDisconnected(String(err))) : resolve()));
    });
  }

  recv(src: number, timeoutMs?: number): Promise<Frame> {
    this.checkPeer(src);
    return this.inboxes.get(src)!.take(timeoutMs ?? this.timeoutMs);
  }

  async close(): Promise<void> {
    if (this.closing) return;
    this.closing = true;
    this.listener.close();
    for (const pending of this.outgoing.values()) {
      try {
        (await pending).destroy();
      } catch {
        /* already gone */
      }
    }
    for (const inbox of this.inboxes.values()) inbox.close("transport closed");
  }
}
