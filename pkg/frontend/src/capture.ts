/**
 * Frame capture loop with backpressure.
 *
 * Ticks at most `targetFps` times per second; at most one classify request
 * is in flight, and ticks that land while a request is pending drop their
 * frame instead of queueing. Time, capture, and transport are injected so
 * the loop is testable with fake timers.
 */

export interface CaptureDeps<F, R> {
  now(): number;
  setTimer(cb: () => void, ms: number): unknown;
  clearTimer(handle: unknown): void;
  captureFrame(): F | null;
  send(frame: F): Promise<R>;
  onResult(result: R): void;
  onError(error: unknown): void;
}

export interface CaptureStats {
  framesSent: number;
  framesDropped: number;
  resultsReceived: number;
  fpsActual: number;
  inFlight: boolean;
}

export class CaptureLoop<F, R> {
  private readonly intervalMs: number;
  private timer: unknown = null;
  private inFlight = false;
  private running = false;
  private sent = 0;
  private dropped = 0;
  private received = 0;
  private completionTimes: number[] = [];

  constructor(targetFps: number, private readonly deps: CaptureDeps<F, R>) {
    const fps = Math.max(1, Math.min(30, targetFps));
    this.intervalMs = 1000 / fps;
  }

  start(): void {
    if (this.running) return;
    this.running = true;
    this.schedule();
  }

  stop(): void {
    this.running = false;
    if (this.timer !== null) {
      this.deps.clearTimer(this.timer);
      this.timer = null;
    }
  }

  stats(): CaptureStats {
    return {
      framesSent: this.sent,
      framesDropped: this.dropped,
      resultsReceived: this.received,
      fpsActual: this.currentFps(),
      inFlight: this.inFlight,
    };
  }

  private currentFps(): number {
    const now = this.deps.now();
    const windowMs = 3000;
    this.completionTimes = this.completionTimes.filter((t) => now - t <= windowMs);
    if (this.completionTimes.length < 2) return this.completionTimes.length;
    const span = now - this.completionTimes[0];
    return span > 0 ? (this.completionTimes.length / span) * 1000 : 0;
  }

  private schedule(): void {
    if (!this.running) return;
    this.timer = this.deps.setTimer(() => this.tick(), this.intervalMs);
  }

  private tick(): void {
    if (!this.running) return;
    if (this.inFlight) {
      this.dropped += 1; // backpressure: drop, never queue
      this.schedule();
      return;
    }
    const frame = this.deps.captureFrame();
    if (frame === null) {
      this.schedule();
      return;
    }
    this.inFlight = true;
    this.sent += 1;
    this.deps
      .send(frame)
      .then((result) => {
        this.received += 1;
        this.completionTimes.push(this.deps.now());
        this.deps.onResult(result);
      })
      .catch((err) => this.deps.onError(err))
      .finally(() => {
        this.inFlight = false;
      });
    this.schedule();
  }
}
