/**
 * "auto" routing against the runtime's tuning-table JSON schema:
 * {"version":1,"system":"...","tables":{"<op>":{"<world>":[{"max_bytes":N,"backend":"id"},...]}}}
 */

import * as fs from "node:fs";

import { MonotonicityError, ParseError, UnroutableRequest } from "./errors.js";
import { DTYPE_SIZE, BoundBuffer } from "./buffers.js";
import { CollectiveRequest } from "./collectives.js";

export interface TableEntry {
  max_bytes: number;
  backend: string;
}

export type TuningTables = Map<string, Map<number, TableEntry[]>>;

export class TuningTable {
  constructor(public tables: TuningTables, public version = 1, public system = "") {
    for (const [op, worlds] of tables) {
      for (const [world, entries] of worlds) {
        if (entries.length === 0) throw new ParseError(`${op}/${world}: empty entry list`);
        for (let i = 1; i < entries.length; i++) {
          if (entries[i].max_bytes <= entries[i - 1].max_bytes) {
            throw new MonotonicityError(`${op}/${world}: max_bytes must strictly increase`);
          }
        }
      }
    }
  }

  static fromDoc(doc: any): TuningTable {
    try {
      const tables: TuningTables = new Map();
      for (const [op, worlds] of Object.entries(doc.tables ?? {})) {
        const byWorld = new Map<number, TableEntry[]>();
        for (const [world, entries] of Object.entries(worlds as object)) {
          byWorld.set(
            Number(world),
            (entries as any[]).map((e) => ({
              max_bytes: Number(e.max_bytes),
              backend: String(e.backend),
            })),
          );
        }
        tables.set(op, byWorld);
      }
      return new TuningTable(tables, doc.version ?? 1, doc.system ?? "");
    } catch (err) {
      if (err instanceof MonotonicityError) throw err;
      throw new ParseError(`malformed tuning table: ${err}`);
    }
  }

  lookup(op: string, worldSize: number, nbytes: number): string | null {
    const worlds = this.tables.get(op);
    if (!worlds || worlds.size === 0) return null;
    let entries = worlds.get(worldSize);
    if (!entries) {
      const smaller = [...worlds.keys()].filter((w) => w <= worldSize);
      if (smaller.length === 0) return null;
      entries = worlds.get(Math.max(...smaller))!;
    }
    for (const entry of entries) {
      if (nbytes <= entry.max_bytes) return entry.backend;
    }
    return entries[entries.length - 1].backend;
  }
}

export function loadTable(path: string): TuningTable {
  let raw: string;
  try {
    raw = fs.readFileSync(path, "utf-8");
  } catch (err) {
    throw new ParseError(`${path}: ${err}`);
  }
  let doc: unknown;
  try {
    doc = JSON.parse(raw);
  } catch (err) {
    throw new ParseError(`${path}: ${err}`);
  }
  return TuningTable.fromDoc(doc);
}

export function messageBytes(req: CollectiveRequest, worldSize: number): number {
  const esize = (buf: BoundBuffer) => DTYPE_SIZE[buf.dtype];
  const input = req.input as BoundBuffer | undefined;
  const output = req.output as BoundBuffer | undefined;
  switch (req.kind) {
    case "gatherv":
    case "all_gatherv":
      return req.rcounts!.reduce((a, b) => a + b, 0) * esize(input!);
    case "scatterv":
      return req.scounts!.reduce((a, b) => a + b, 0) * esize(output!);
    case "all_to_allv":
      return req.scounts!.reduce((a, b) => a + b, 0) * esize(input!);
    case "all_to_all":
      return (req.input as BoundBuffer[]).reduce((a, b) => a + b.nbytes, 0);
    case "scatter":
      return worldSize * output!.nbytes;
    case "recv":
    case "bcast":
    case "reduce_scatter":
      return output!.nbytes;
    default:
      return input instanceof BoundBuffer ? input.nbytes : 0;
  }
}

export function route(
  table: TuningTable | null,
  op: string,
  worldSize: number,
  nbytes: number,
  registered: string[],
): string {
  if (registered.length === 0) throw new UnroutableRequest("no backends registered");
  const choice = table?.lookup(op, worldSize, nbytes) ?? null;
  if (choice === null) return registered[0];
  if (!registered.includes(choice)) {
    throw new UnroutableRequest(
      `tuning table routes ${op}/${nbytes}B to unregistered backend ${choice}`,
    );
  }
  return choice;
}
