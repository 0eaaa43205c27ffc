import { describe, expect, it } from "vitest";

import { DragTarget, HandleDragController, PointerEventLike } from "../src/drag.js";
import { SnapshotMessage } from "../src/protocol.js";
import { ViewStore } from "../src/store.js";

function snapshot(step: SnapshotMessage["step"]): SnapshotMessage {
  return {
    type: "snapshot",
    t_s: 1.0,
    step,
    insertion_index: 1,
    phase: "breath_hold",
    hold_index: 1,
    d_si_mm: 0,
    d_ap_mm: 0,
    d_lat_mm: 0,
    tip_mm: [0, 0, 80],
    desired_mm: [0, 0, 80],
    target_mm: [0, 0, 150],
    distance_to_target_mm: 20,
    force_n: 0,
    regime: "proximity",
  };
}

function insertingStore(): ViewStore {
  const store = new ViewStore();
  store.role = "operator";
  store.setStatus("connected");
  store.applySnapshot(snapshot("inserting"));
  return store;
}

class FakeTarget implements DragTarget {
  handlers = new Map<string, (ev: PointerEventLike) => void>();
  captured: number[] = [];

  addEventListener(type: string, handler: (ev: PointerEventLike) => void): void {
    this.handlers.set(type, handler);
  }

  setPointerCapture(pointerId: number): void {
    this.captured.push(pointerId);
  }

  fire(type: string, ev: PointerEventLike): void {
    this.handlers.get(type)?.(ev);
  }
}

function controllerWithLog(store: ViewStore, mmPerPx: number, clock?: () => number) {
  const sent: Array<{ position: number; engaged: boolean }> = [];
  const controller = new HandleDragController(
    store,
    (position, engaged) => sent.push({ position, engaged }),
    mmPerPx,
    clock,
  );
  return { controller, sent };
}

describe("handle drag", () => {
  it("maps a 100 px drag at 0.1 mm/px to a 10 mm command", () => {
    const { controller, sent } = controllerWithLog(insertingStore(), 0.1);
    const target = new FakeTarget();
    controller.attach(target);

    target.fire("pointerdown", { pointerId: 1, clientY: 300 });
    target.fire("pointermove", { pointerId: 1, clientY: 400 }); // 100 px down
    expect(sent).toEqual([{ position: 10, engaged: true }]);
    expect(target.captured).toEqual([1]);
  });

  it("release sends a disengage command at the final position", () => {
    const { controller, sent } = controllerWithLog(insertingStore(), 0.1);
    const target = new FakeTarget();
    controller.attach(target);

    target.fire("pointerdown", { pointerId: 7, clientY: 0 });
    target.fire("pointermove", { pointerId: 7, clientY: 50 });
    target.fire("pointerup", { pointerId: 7, clientY: 50 });
    expect(sent[sent.length - 1]).toEqual({ position: 5, engaged: false });
  });

  it("drags accumulate across grabs", () => {
    let nowMs = 0;
    const { controller, sent } = controllerWithLog(insertingStore(), 0.1, () => nowMs);
    const target = new FakeTarget();
    controller.attach(target);

    target.fire("pointerdown", { pointerId: 1, clientY: 0 });
    target.fire("pointermove", { pointerId: 1, clientY: 100 });
    target.fire("pointerup", { pointerId: 1, clientY: 100 });
    nowMs = 100;
    target.fire("pointerdown", { pointerId: 2, clientY: 500 });
    target.fire("pointermove", { pointerId: 2, clientY: 530 });
    expect(sent[sent.length - 1]).toEqual({ position: 13, engaged: true });
  });

  it("suppresses input outside the insertion step", () => {
    const store = insertingStore();
    store.applySnapshot({ ...snapshot("compensating"), t_s: 2.0 });
    const { controller, sent } = controllerWithLog(store, 0.1);
    const target = new FakeTarget();
    controller.attach(target);

    target.fire("pointerdown", { pointerId: 1, clientY: 0 });
    target.fire("pointermove", { pointerId: 1, clientY: 80 });
    expect(sent).toEqual([]);
    expect(store.drag.active).toBe(false);
  });

  it("observers get no handle input", () => {
    const store = insertingStore();
    store.role = "observer";
    const { controller, sent } = controllerWithLog(store, 0.1);
    const target = new FakeTarget();
    controller.attach(target);
    target.fire("pointerdown", { pointerId: 1, clientY: 0 });
    target.fire("pointermove", { pointerId: 1, clientY: 80 });
    expect(sent).toEqual([]);
  });

  it("rate-limits move commands to 60 Hz with a trailing flush", () => {
    let nowMs = 0;
    const { controller, sent } = controllerWithLog(insertingStore(), 0.1, () => nowMs);
    const target = new FakeTarget();
    controller.attach(target);

    target.fire("pointerdown", { pointerId: 1, clientY: 0 });
    target.fire("pointermove", { pointerId: 1, clientY: 10 }); // sent immediately
    nowMs = 5;
    target.fire("pointermove", { pointerId: 1, clientY: 20 }); // held back
    nowMs = 10;
    target.fire("pointermove", { pointerId: 1, clientY: 30 }); // replaces pending
    expect(sent).toEqual([{ position: 1, engaged: true }]);

    nowMs = 20;
    controller.flush();
    expect(sent).toEqual([
      { position: 1, engaged: true },
      { position: 3, engaged: true },
    ]);
  });

  it("drops the grab when the session leaves the insertion step mid-drag", () => {
    const store = insertingStore();
    const { controller, sent } = controllerWithLog(store, 0.1);
    const target = new FakeTarget();
    controller.attach(target);

    target.fire("pointerdown", { pointerId: 1, clientY: 0 });
    store.applySnapshot({ ...snapshot("done"), t_s: 5.0 });
    target.fire("pointermove", { pointerId: 1, clientY: 40 });
    expect(sent).toEqual([{ position: 0, engaged: false }]);
  });
});
