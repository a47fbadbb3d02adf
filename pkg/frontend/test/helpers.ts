import { Session } from "../src/client.js";

let nextBase = 21000 + Math.floor(Math.random() * 20000);

/** A fresh base port region for a world (each backend uses base + index). */
export function portBase(span = 4): number {
  const base = nextBase;
  nextBase += span;
  return base;
}

/** Spin up an all-local world of TS sessions and run body per rank. */
export async function tsWorld<T>(
  worldSize: number,
  backends: string[],
  body: (session: Session, rank: number) => Promise<T>,
  basePort = portBase(),
): Promise<T[]> {
  const sessions = await Promise.all(
    Array.from({ length: worldSize }, (_, rank) =>
      Session.init({
        backends,
        rank,
        world_size: worldSize,
        master_addr: "127.0.0.1",
        master_port: basePort,
        timeout_ms: 20_000,
      }),
    ),
  );
  try {
    return await Promise.all(sessions.map((s, rank) => body(s, rank)));
  } finally {
    await Promise.all(sessions.map((s) => s.finalize().catch(() => {})));
  }
}
