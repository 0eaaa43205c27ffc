// Pointer-drag handle input: vertical drag maps to axial handle position.
// Commands leave at most at the snapshot publish rate (60 Hz); releasing
// the pointer disengages so the server-side idle hold takes over.

import { ViewStore } from "./store.js";

export interface PointerEventLike {
  pointerId: number;
  clientY: number;
  preventDefault?: () => void;
}

export interface DragTarget {
  addEventListener(type: string, handler: (ev: PointerEventLike) => void): void;
  setPointerCapture?(pointerId: number): void;
  releasePointerCapture?(pointerId: number): void;
}

export type CommandSink = (positionMm: number, engaged: boolean) => void;

const MIN_SEND_INTERVAL_MS = 1000 / 60;

export class HandleDragController {
  currentPositionMm = 0;
  private pointerId: number | null = null;
  private lastSentMs = -Infinity;
  private pendingPosition: number | null = null;

  constructor(
    private store: ViewStore,
    private send: CommandSink,
    private mmPerPixel: number,
    private now: () => number = () => Date.now(),
  ) {}

  attach(target: DragTarget): void {
    target.addEventListener("pointerdown", (ev) => {
      if (this.beginDrag(ev)) target.setPointerCapture?.(ev.pointerId);
    });
    target.addEventListener("pointermove", (ev) => this.moveDrag(ev));
    const up = (ev: PointerEventLike) => {
      if (this.endDrag(ev)) target.releasePointerCapture?.(ev.pointerId);
    };
    target.addEventListener("pointerup", up);
    target.addEventListener("pointercancel", up);
  }

  beginDrag(ev: PointerEventLike): boolean {
    if (this.pointerId !== null || !this.store.inputEnabled) return false;
    ev.preventDefault?.();
    this.pointerId = ev.pointerId;
    this.store.drag = {
      active: true,
      startY: ev.clientY,
      startPositionMm: this.currentPositionMm,
    };
    return true;
  }

  moveDrag(ev: PointerEventLike): void {
    if (this.pointerId !== ev.pointerId || !this.store.drag.active) return;
    ev.preventDefault?.();
    if (!this.store.inputEnabled) {
      // step changed under us (e.g. compensation resumed): drop the grab
      this.cancelDrag();
      return;
    }
    // dragging down advances the needle
    const deltaPx = ev.clientY - this.store.drag.startY;
    this.currentPositionMm = this.store.drag.startPositionMm + deltaPx * this.mmPerPixel;
    this.throttledSend(this.currentPositionMm);
  }

  endDrag(ev: PointerEventLike): boolean {
    if (this.pointerId !== ev.pointerId) return false;
    ev.preventDefault?.();
    this.pointerId = null;
    this.store.drag = { active: false, startY: 0, startPositionMm: 0 };
    this.pendingPosition = null;
    this.send(this.currentPositionMm, false); // idle hold takes over
    return true;
  }

  cancelDrag(): void {
    if (this.pointerId === null) return;
    this.pointerId = null;
    this.store.drag = { active: false, startY: 0, startPositionMm: 0 };
    this.pendingPosition = null;
    this.send(this.currentPositionMm, false);
  }

  /** Send trailing updates held back by the rate limit; call per frame. */
  flush(): void {
    if (this.pendingPosition === null) return;
    if (this.now() - this.lastSentMs >= MIN_SEND_INTERVAL_MS) {
      this.lastSentMs = this.now();
      this.send(this.pendingPosition, true);
      this.pendingPosition = null;
    }
  }

  private throttledSend(positionMm: number): void {
    const t = this.now();
    if (t - this.lastSentMs >= MIN_SEND_INTERVAL_MS) {
      this.lastSentMs = t;
      this.send(positionMm, true);
      this.pendingPosition = null;
    } else {
      this.pendingPosition = positionMm;
    }
  }
}
