export { Session, WorkHandle, AUTO } from "./client.js";
export type { SessionOptions, OpOptions, ReduceOptions } from "./client.js";
export { BoundBuffer, DTYPE_SIZE, bytesToElements, elementsToBytes } from "./buffers.js";
export type { DTypeName, ElementArray } from "./buffers.js";
export { TuningTable, loadTable, messageBytes, route } from "./dispatch.js";
export { TcpTransport, bookToJson } from "./transport.js";
export type { AddressBook, Endpoint } from "./transport.js";
export {
  FRAME_HEADER_LEN,
  FRAME_MAGIC,
  FRAME_VERSION,
  FrameParser,
  KIND_BOOTSTRAP,
  KIND_HEADER,
  KIND_P2P,
  packFrame,
  unpackFrameHeader,
} from "./wire.js";
export { applyReduce, runCollective } from "./collectives.js";
export type { CollectiveRequest, OpKind, ReduceOpName } from "./collectives.js";
export * as errors from "./errors.js";
