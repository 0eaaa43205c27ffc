// Operator console bootstrap.  Configuration via URL query parameters:
//   ?server=ws://127.0.0.1:8732   bridge to connect to
//   &mmppx=0.1                    handle millimetres per dragged pixel
//   &role=operator|observer

import { BridgeClient } from "./client.js";
import { HandleDragController } from "./drag.js";
import { Role } from "./protocol.js";
import { ViewStore } from "./store.js";
import { ConsoleView } from "./view.js";

function param(name: string, fallback: string): string {
  return new URLSearchParams(window.location.search).get(name) ?? fallback;
}

const server = param("server", `ws://${window.location.hostname || "127.0.0.1"}:8732`);
const mmPerPixel = Number(param("mmppx", "0.1"));
const role = (param("role", "operator") === "observer" ? "observer" : "operator") as Role;

const canvas = document.getElementById("console") as HTMLCanvasElement;
const store = new ViewStore();
const client = new BridgeClient(server, role, store);
const view = new ConsoleView(canvas, store);
const drag = new HandleDragController(store, (pos, engaged) => client.sendCommand(pos, engaged), mmPerPixel);

if (role === "operator") {
  canvas.style.touchAction = "none";
  drag.attach(canvas as unknown as Parameters<typeof drag.attach>[0]);
}

client.connect();

function frame(): void {
  drag.flush();
  view.render();
  requestAnimationFrame(frame);
}
requestAnimationFrame(frame);
