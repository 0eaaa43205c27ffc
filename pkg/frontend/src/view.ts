// Rendering: a pure view-model derivation plus a thin canvas painter.
// The needle, target and force bar are always positioned from the latest
// snapshot; nothing is extrapolated client-side.

import { SnapshotMessage } from "./protocol.js";
import { ViewStore } from "./store.js";

export interface RenderModel {
  banner: string;
  forceN: number | null; // exactly the snapshot force, never smoothed
  forceFraction: number; // |force| / wall level, clamped to [0, 1]
  distanceMm: number | null;
  regime: string;
  stepLabel: string;
  wallContact: boolean;
  inputEnabled: boolean;
  connection: string;
  needle: { tipX: number; tipY: number } | null; // screen coordinates
  target: { x: number; y: number } | null;
  holdLabel: string;
}

export const WALL_LEVEL_N = 5.0;

export interface ScreenMapping {
  width: number;
  height: number;
  pxPerMm: number;
}

// Side view: anterior-posterior along screen x (the needle axis), superior-
// inferior along screen y (up is +SI).  World axes: x=SI, y=lateral, z=AP.
export function worldToScreen(
  world: [number, number, number],
  center: [number, number, number],
  map: ScreenMapping,
): { x: number; y: number } {
  return {
    x: map.width / 2 + (world[2] - center[2]) * map.pxPerMm,
    y: map.height / 2 - (world[0] - center[0]) * map.pxPerMm,
  };
}

export function deriveRenderModel(store: ViewStore, map: ScreenMapping): RenderModel {
  const snap = store.snapshot;
  const connection =
    store.status === "connected" ? "" :
    store.status === "connecting" ? "connecting..." : "connection lost - reconnecting";
  if (snap === null) {
    return {
      banner: "waiting for session",
      forceN: null,
      forceFraction: 0,
      distanceMm: null,
      regime: "idle",
      stepLabel: "-",
      wallContact: false,
      inputEnabled: false,
      connection,
      needle: null,
      target: null,
      holdLabel: "",
    };
  }
  const center = snap.target_mm;
  return {
    banner: bannerFor(snap, store),
    forceN: snap.force_n,
    forceFraction: Math.min(Math.abs(snap.force_n) / WALL_LEVEL_N, 1.0),
    distanceMm: snap.distance_to_target_mm,
    regime: snap.regime,
    stepLabel: snap.step,
    wallContact: snap.regime === "wall",
    inputEnabled: store.inputEnabled,
    connection,
    needle: (() => {
      const p = worldToScreen(snap.tip_mm, center, map);
      return { tipX: p.x, tipY: p.y };
    })(),
    target: worldToScreen(snap.target_mm, center, map),
    holdLabel: snap.phase === "breath_hold" ? `breath-hold ${snap.hold_index}` : snap.phase,
  };
}

function bannerFor(snap: SnapshotMessage, store: ViewStore): string {
  switch (snap.step) {
    case "training":
      return "training the motion model - phantom breathing";
    case "compensating":
      return "compensating respiratory motion";
    case "inserting":
      return store.role === "operator"
        ? "inserting: drag down to advance the needle"
        : "inserting (observer)";
    case "done":
      return "session complete";
    default:
      return snap.step;
  }
}

type Ctx = CanvasRenderingContext2D;

export class ConsoleView {
  constructor(
    private canvas: HTMLCanvasElement,
    private store: ViewStore,
  ) {}

  get mapping(): ScreenMapping {
    return { width: this.canvas.width, height: this.canvas.height, pxPerMm: 3.0 };
  }

  render(): RenderModel {
    const model = deriveRenderModel(this.store, this.mapping);
    const ctx = this.canvas.getContext("2d");
    if (ctx) this.paint(ctx, model);
    return model;
  }

  private paint(ctx: Ctx, model: RenderModel): void {
    const { width, height } = this.canvas;
    ctx.clearRect(0, 0, width, height);
    ctx.fillStyle = "#10141a";
    ctx.fillRect(0, 0, width, height);

    const snap = this.store.snapshot;
    if (snap && model.target && model.needle) {
      // phantom body around the target
      ctx.fillStyle = "#23303d";
      ctx.beginPath();
      ctx.ellipse(model.target.x, model.target.y, 140, 90, 0, 0, Math.PI * 2);
      ctx.fill();

      // target with ring; the ring flashes on wall contact
      ctx.beginPath();
      ctx.arc(model.target.x, model.target.y, 4.5, 0, Math.PI * 2);
      ctx.fillStyle = "#d7dde4";
      ctx.fill();
      ctx.beginPath();
      ctx.arc(model.target.x, model.target.y, 10, 0, Math.PI * 2);
      ctx.strokeStyle = model.wallContact ? "#ff5252" : "#5d6f81";
      ctx.lineWidth = model.wallContact ? 4 : 2;
      ctx.stroke();

      // needle: shaft trails back along the insertion axis (screen -x)
      ctx.beginPath();
      ctx.moveTo(model.needle.tipX, model.needle.tipY);
      ctx.lineTo(model.needle.tipX - 160, model.needle.tipY);
      ctx.strokeStyle = "#9fd3ff";
      ctx.lineWidth = 3;
      ctx.stroke();

      ctx.fillStyle = "#9fb2c4";
      ctx.font = "13px system-ui, sans-serif";
      ctx.fillText(`SI ${snap.d_si_mm.toFixed(1)} mm`, 12, height - 52);
      ctx.fillText(`AP ${snap.d_ap_mm.toFixed(1)} mm`, 12, height - 34);
      ctx.fillText(`lateral ${snap.d_lat_mm.toFixed(1)} mm`, 12, height - 16);
    }

    // force bar with a ramp to red at the wall level
    const barH = Math.round((height - 80) * model.forceFraction);
    const hue = Math.round(120 * (1 - model.forceFraction));
    ctx.fillStyle = "#1d242c";
    ctx.fillRect(width - 46, 40, 26, height - 80);
    ctx.fillStyle = `hsl(${hue}, 80%, 55%)`;
    ctx.fillRect(width - 46, 40 + (height - 80) - barH, 26, barH);
    ctx.strokeStyle = "#5d6f81";
    ctx.strokeRect(width - 46, 40, 26, height - 80);

    ctx.fillStyle = "#e8eef4";
    ctx.font = "15px system-ui, sans-serif";
    ctx.fillText(model.banner, 12, 24);
    ctx.font = "13px system-ui, sans-serif";
    ctx.fillStyle = "#9fb2c4";
    if (model.forceN !== null) {
      ctx.fillText(`force ${model.forceN.toFixed(2)} N (${model.regime})`, 12, 46);
    }
    if (model.distanceMm !== null) {
      ctx.fillText(`distance to target ${model.distanceMm.toFixed(1)} mm`, 12, 64);
    }
    ctx.fillText(`${model.stepLabel} | ${model.holdLabel}`, 12, 82);
    if (model.connection) {
      ctx.fillStyle = "#ffb74d";
      ctx.fillText(model.connection, 12, 100);
    }
    if (!model.inputEnabled && this.store.role === "operator" && this.store.snapshot) {
      ctx.fillStyle = "#78909c";
      ctx.fillText("handle input disabled outside the insertion step", 12, 118);
    }
  }
}
