// Bridge client: hello handshake, snapshot stream in, commands out.

import {
  Message,
  ProtocolError,
  Role,
  commandMessage,
  decodeFrame,
  encodeFrame,
} from "./protocol.js";
import { ViewStore } from "./store.js";

type SocketFactory = (url: string) => WebSocket;

export class BridgeClient {
  private socket: WebSocket | null = null;
  private reconnectDelayMs = 1000;
  private closedByUser = false;

  constructor(
    private url: string,
    private role: Role,
    private store: ViewStore,
    private socketFactory: SocketFactory = (u) => new WebSocket(u),
  ) {
    store.role = role;
  }

  connect(): void {
    this.closedByUser = false;
    this.store.setStatus("connecting");
    const socket = this.socketFactory(this.url);
    this.socket = socket;
    socket.onopen = () => {
      socket.send(encodeFrame({ type: "hello", role: this.role }));
      this.store.setStatus("connected");
    };
    socket.onmessage = (event: MessageEvent) => {
      if (typeof event.data !== "string") return;
      let message: Message;
      try {
        message = decodeFrame(event.data);
      } catch (err) {
        if (err instanceof ProtocolError) return; // ignore undecodable frames
        throw err;
      }
      if (message.type === "snapshot") {
        this.store.applySnapshot(message);
      } else if (message.type === "error") {
        this.store.applyError(message);
      }
    };
    socket.onclose = () => {
      this.store.setStatus("closed");
      if (!this.closedByUser) {
        setTimeout(() => this.connect(), this.reconnectDelayMs);
      }
    };
  }

  close(): void {
    this.closedByUser = true;
    this.socket?.close();
  }

  sendCommand(positionMm: number, engaged: boolean): void {
    if (!this.socket || this.socket.readyState !== WebSocket.OPEN) return;
    const t = this.store.snapshot?.t_s ?? 0;
    this.socket.send(encodeFrame(commandMessage(t, positionMm, engaged)));
  }
}
