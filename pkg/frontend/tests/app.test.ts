import { beforeEach, describe, expect, it } from "vitest";
import { StudioApp } from "../src/app.js";
import type { StudioApi } from "../src/api.js";
import type { Timers } from "../src/debounce.js";

class FakeClock implements Timers {
  now = 0;
  private next = 1;
  private tasks = new Map<number, { at: number; fn: () => void }>();

  set(fn: () => void, ms: number): number {
    const id = this.next++;
    this.tasks.set(id, { at: this.now + ms, fn });
    return id;
  }

  clear(id: number): void {
    this.tasks.delete(id);
  }

  async advance(ms: number): Promise<void> {
    const target = this.now + ms;
    for (;;) {
      const due = [...this.tasks.entries()]
        .filter(([, t]) => t.at <= target)
        .sort((a, b) => a[1].at - b[1].at)[0];
      if (!due) break;
      this.tasks.delete(due[0]);
      this.now = due[1].at;
      due[1].fn();
      await flushMicrotasks();
    }
    this.now = target;
  }
}

const flushMicrotasks = () => new Promise<void>((r) => setTimeout(r, 0));

interface SynthCall {
  layoutId: string;
  noise: number[];
  resolve: (url: string) => void;
}

/** Structural fake for StudioApi: records synthesize calls and lets the
 * test resolve them manually (enables out-of-order delivery). */
class FakeApi {
  calls: SynthCall[] = [];
  manual = false;
  private counter = 0;

  async meta() {
    return {
      class_count: 4,
      class_names: ["wall", "window", "door", "roof"],
      layout_ids: ["l0", "l1"],
      image_size: 16,
    };
  }

  async layout(_id: string) {
    return {
      width: 2,
      height: 2,
      pixels: [0, 1, 2, 3],
      palette: [
        [0.8, 0.8, 0.8],
        [0.2, 0.3, 0.9],
        [0.6, 0.2, 0.1],
        [0.2, 0.5, 0.3],
      ],
    };
  }

  synthesize(layoutId: string, noise: number[]): Promise<string> {
    this.counter += 1;
    const url = `blob:synth-${this.counter}-[${noise.join(",")}]`;
    if (!this.manual) {
      this.calls.push({ layoutId, noise, resolve: () => {} });
      return Promise.resolve(url);
    }
    return new Promise<string>((resolve) => {
      this.calls.push({ layoutId, noise, resolve });
    });
  }

  async sweep(_layoutId: string, cls: number, steps: number[]) {
    return {
      format: "png_base64",
      class: cls,
      steps,
      images: steps.map(() => "aGVsbG8="),
    };
  }
}

function mountDom(): Document {
  document.body.innerHTML = `
    <select id="layout-picker"></select>
    <canvas id="layout-preview"></canvas>
    <div id="sliders"></div>
    <button id="reset"></button>
    <button id="pin"></button>
    <img id="main-image">
    <figure id="pinned-pane" style="display:none">
      <img id="pinned-image">
      <figcaption id="pinned-caption"></figcaption>
    </figure>
    <div id="sweep-strip"></div>
    <p id="sweep-caption"></p>
    <div id="toast"></div>`;
  return document;
}

describe("studio app", () => {
  let clock: FakeClock;
  let api: FakeApi;
  let app: StudioApp;

  beforeEach(async () => {
    clock = new FakeClock();
    api = new FakeApi();
    app = new StudioApp(mountDom(), api as unknown as StudioApi, {
      debounceMs: 150,
      timers: clock,
    });
    await app.init();
    await flushMicrotasks();
    api.calls.length = 0; // drop the initial render
  });

  it("builds one labeled slider per class", () => {
    const rows = document.querySelectorAll("#sliders .slider-row");
    expect(rows.length).toBe(4);
    const labels = [...document.querySelectorAll("#sliders label")].map(
      (l) => l.textContent,
    );
    expect(labels).toEqual(["wall", "window", "door", "roof"]);
  });

  it("rapid drag issues at most one request per debounce window", async () => {
    for (let i = 1; i <= 12; i++) {
      app.onSliderChange(1, i * 0.05);
      await clock.advance(10); // 12 events over 120ms, all inside one window
    }
    expect(api.calls.length).toBe(0);
    await clock.advance(150);
    await flushMicrotasks();
    expect(api.calls.length).toBe(1);
    expect(api.calls[0].noise[1]).toBeCloseTo(0.6);
  });

  it("the displayed image updates after a drag settles", async () => {
    app.onSliderChange(2, 0.5);
    await clock.advance(200);
    await flushMicrotasks();
    const img = document.getElementById("main-image") as HTMLImageElement;
    expect(img.src).toContain("synth-");
    expect(img.src).toContain("0,0,0.5,0");
  });

  it("reset zeroes sliders and shows the zero-noise image immediately", async () => {
    app.onSliderChange(0, 0.8);
    await clock.advance(200);
    await flushMicrotasks();
    await app.reset();
    await flushMicrotasks();
    const sliders = document.querySelectorAll<HTMLInputElement>("#sliders input");
    sliders.forEach((s) => expect(s.value).toBe("0"));
    const img = document.getElementById("main-image") as HTMLImageElement;
    expect(img.src).toContain("[0,0,0,0]");
    // reset request was immediate, not debounced
    const last = api.calls[api.calls.length - 1];
    expect(last.noise).toEqual([0, 0, 0, 0]);
  });

  it("out-of-order responses never overwrite newer ones", async () => {
    api.manual = true;
    app.onSliderChange(0, 0.3);
    await clock.advance(150);
    app.onSliderChange(0, 0.7);
    await clock.advance(150);
    await flushMicrotasks();
    expect(api.calls.length).toBe(2);
    // resolve newest first, then the stale one
    api.calls[1].resolve("blob:newest");
    await flushMicrotasks();
    api.calls[0].resolve("blob:stale");
    await flushMicrotasks();
    const img = document.getElementById("main-image") as HTMLImageElement;
    expect(img.src).toContain("blob:newest");
    expect(app.state.imageUrl).toBe("blob:newest");
  });

  it("sweep renders one strip cell per step", async () => {
    await app.showSweep(1);
    await flushMicrotasks();
    const cells = document.querySelectorAll("#sweep-strip img");
    expect(cells.length).toBe(5);
  });

  it("pin freezes the comparison pane", async () => {
    app.onSliderChange(3, -0.4);
    await clock.advance(200);
    await flushMicrotasks();
    app.pinCompare();
    const pane = document.getElementById("pinned-pane") as HTMLElement;
    expect(pane.style.display).not.toBe("none");
    const caption = document.getElementById("pinned-caption") as HTMLElement;
    expect(caption.textContent).toContain("-0.40");
    // moving on does not disturb the pin
    app.onSliderChange(3, 0.9);
    await clock.advance(200);
    await flushMicrotasks();
    expect(app.state.pinned?.noise[3]).toBeCloseTo(-0.4);
  });

  it("slider arity and range always match the meta", () => {
    const sliders = document.querySelectorAll<HTMLInputElement>("#sliders input");
    expect(sliders.length).toBe(4);
    sliders.forEach((s) => {
      expect(s.min).toBe("-1");
      expect(s.max).toBe("1");
    });
  });

  it("api failures surface as a toast and sliders stay responsive", async () => {
    api.synthesize = () => Promise.reject(new Error("boom"));
    app.onSliderChange(0, 0.2);
    await clock.advance(200);
    await flushMicrotasks();
    const toast = document.getElementById("toast") as HTMLElement;
    expect(toast.textContent).toContain("boom");
    app.onSliderChange(0, 0.4);
    expect(app.state.noise[0]).toBeCloseTo(0.4);
  });
});
