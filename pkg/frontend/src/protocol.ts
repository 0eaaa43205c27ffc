// Wire protocol shared with the simulator bridge: every websocket text
// message carries one frame, "<byte length of JSON>\n<JSON>".

export type Role = "operator" | "observer";

export interface HelloMessage {
  type: "hello";
  role: Role;
}

export interface SnapshotMessage {
  type: "snapshot";
  t_s: number;
  step: "training" | "compensating" | "inserting" | "done";
  insertion_index: number;
  phase: string;
  hold_index: number;
  d_si_mm: number;
  d_ap_mm: number;
  d_lat_mm: number;
  tip_mm: [number, number, number];
  desired_mm: [number, number, number];
  target_mm: [number, number, number];
  distance_to_target_mm: number;
  force_n: number;
  regime: "proximity" | "wall" | "idle";
}

export interface CommandMessage {
  type: "command";
  t_s: number;
  position_mm: number;
  engaged: boolean;
}

export interface ErrorMessage {
  type: "error";
  code: string;
  detail: string;
}

export type Message = HelloMessage | SnapshotMessage | CommandMessage | ErrorMessage;

const MESSAGE_TYPES = new Set(["hello", "snapshot", "command", "error"]);

export class ProtocolError extends Error {
  constructor(public code: string, detail: string) {
    super(`${code}: ${detail}`);
  }
}

const encoder = new TextEncoder();

export function encodeFrame(message: Message): string {
  if (!MESSAGE_TYPES.has((message as { type?: string }).type ?? "")) {
    throw new ProtocolError("unknown-type", `unknown message type ${String((message as { type?: string }).type)}`);
  }
  const body = JSON.stringify(message);
  return `${encoder.encode(body).length}\n${body}`;
}

export function decodeFrame(raw: string): Message {
  const split = raw.indexOf("\n");
  if (split < 0) {
    throw new ProtocolError("bad-frame", "missing length prefix");
  }
  const head = raw.slice(0, split);
  const length = Number(head);
  if (!/^\d+$/.test(head) || !Number.isSafeInteger(length)) {
    throw new ProtocolError("bad-frame", `invalid length prefix ${JSON.stringify(head)}`);
  }
  const body = raw.slice(split + 1);
  const byteLength = encoder.encode(body).length;
  if (byteLength < length) {
    throw new ProtocolError("truncated-frame", `expected ${length} bytes, got ${byteLength}`);
  }
  if (byteLength > length) {
    throw new ProtocolError("bad-frame", `expected ${length} bytes, got ${byteLength}`);
  }
  let message: unknown;
  try {
    message = JSON.parse(body);
  } catch (err) {
    throw new ProtocolError("bad-json", String(err));
  }
  if (typeof message !== "object" || message === null || Array.isArray(message)) {
    throw new ProtocolError("bad-frame", "frame payload is not an object");
  }
  const type = (message as { type?: unknown }).type;
  if (typeof type !== "string" || !MESSAGE_TYPES.has(type)) {
    throw new ProtocolError("unknown-type", `unknown message type ${JSON.stringify(type)}`);
  }
  return message as Message;
}

export function commandMessage(tS: number, positionMm: number, engaged: boolean): CommandMessage {
  if (!Number.isFinite(positionMm)) {
    throw new ProtocolError("invalid-command", "handle position must be finite");
  }
  return { type: "command", t_s: tS, position_mm: positionMm, engaged };
}
