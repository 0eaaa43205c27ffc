// Single state store: socket messages and pointer events both funnel here,
// and the renderer reads only from it.  No client-side physics: every
// displayed quantity comes from the latest server snapshot.

import { ErrorMessage, SnapshotMessage } from "./protocol.js";

export type ConnectionStatus = "connecting" | "connected" | "closed";

export interface DragState {
  active: boolean;
  startY: number;
  startPositionMm: number;
}

export class ViewStore {
  snapshot: SnapshotMessage | null = null;
  status: ConnectionStatus = "connecting";
  lastError: ErrorMessage | null = null;
  drag: DragState = { active: false, startY: 0, startPositionMm: 0 };
  role: "operator" | "observer" = "operator";

  private listeners: Array<() => void> = [];

  onChange(listener: () => void): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const fn of this.listeners) fn();
  }

  applySnapshot(snapshot: SnapshotMessage): void {
    // the stream never reorders; guard anyway so the view cannot go back
    if (this.snapshot === null || snapshot.t_s > this.snapshot.t_s) {
      this.snapshot = snapshot;
      this.emit();
    }
  }

  applyError(error: ErrorMessage): void {
    this.lastError = error;
    this.emit();
  }

  setStatus(status: ConnectionStatus): void {
    this.status = status;
    if (status !== "connected") {
      this.drag = { active: false, startY: 0, startPositionMm: 0 };
    }
    this.emit();
  }

  get inputEnabled(): boolean {
    return (
      this.role === "operator" &&
      this.status === "connected" &&
      this.snapshot !== null &&
      this.snapshot.step === "inserting"
    );
  }
}
