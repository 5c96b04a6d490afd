import { StudioApi } from "./api.js";
import { debounce, Debounced, Timers, realTimers } from "./debounce.js";
import {
  StudioState,
  initialState,
  withSlider,
  withReset,
  withPin,
  issueRequest,
  applyResponse,
} from "./state.js";

export interface AppOptions {
  debounceMs?: number;
  timers?: Timers;
  sweepSteps?: number[];
}

const DEFAULT_SWEEP = [-1, -0.5, 0, 0.5, 1];

/** Studio controller: wires sliders, layout picker, sweep strip and the
 * pin/compare pane onto a document. All server traffic goes through the
 * injected StudioApi; display state is a pure function of the newest
 * accepted response plus the pinned snapshot. */
export class StudioApp {
  state: StudioState;
  private debouncedSynth: Debounced<[]>;
  private sliders: HTMLInputElement[] = [];
  readonly requestLog: number[] = [];

  constructor(
    private doc: Document,
    private api: StudioApi,
    private opts: AppOptions = {},
  ) {
    this.state = initialState(0);
    this.debouncedSynth = debounce(
      () => void this.synthesizeNow(),
      opts.debounceMs ?? 150,
      opts.timers ?? realTimers,
    );
  }

  async init(): Promise<void> {
    const meta = await this.api.meta();
    this.state = initialState(meta.class_count);
    this.state = { ...this.state, layoutId: meta.layout_ids[0] ?? null };

    const picker = this.el<HTMLSelectElement>("layout-picker");
    picker.innerHTML = "";
    for (const id of meta.layout_ids) {
      const opt = this.doc.createElement("option");
      opt.value = id;
      opt.textContent = id;
      picker.appendChild(opt);
    }
    picker.addEventListener("change", () => {
      this.state = { ...this.state, layoutId: picker.value };
      void this.synthesizeNow();
      void this.drawLayoutPreview();
    });

    const panel = this.el<HTMLElement>("sliders");
    panel.innerHTML = "";
    this.sliders = [];
    meta.class_names.forEach((name, c) => {
      const row = this.doc.createElement("div");
      row.className = "slider-row";
      const label = this.doc.createElement("label");
      label.textContent = name;
      label.htmlFor = `slider-${c}`;
      const input = this.doc.createElement("input");
      input.type = "range";
      input.id = `slider-${c}`;
      input.min = "-1";
      input.max = "1";
      input.step = "0.05";
      input.value = "0";
      input.addEventListener("input", () => this.onSliderChange(c, Number(input.value)));
      const value = this.doc.createElement("span");
      value.id = `slider-value-${c}`;
      value.textContent = "0.00";
      const sweepBtn = this.doc.createElement("button");
      sweepBtn.textContent = "sweep";
      sweepBtn.id = `sweep-${c}`;
      sweepBtn.addEventListener("click", () => void this.showSweep(c));
      row.append(label, input, value, sweepBtn);
      panel.appendChild(row);
      this.sliders.push(input);
    });

    this.el<HTMLButtonElement>("reset").addEventListener("click", () => void this.reset());
    this.el<HTMLButtonElement>("pin").addEventListener("click", () => this.pinCompare());

    await this.synthesizeNow();
    await this.drawLayoutPreview();
  }

  onSliderChange(c: number, value: number): void {
    this.state = withSlider(this.state, c, value);
    const label = this.doc.getElementById(`slider-value-${c}`);
    if (label) label.textContent = this.state.noise[c].toFixed(2);
    this.debouncedSynth();
  }

  /** Immediate (not debounced) zero-noise render. */
  async reset(): Promise<void> {
    this.debouncedSynth.cancel();
    this.state = withReset(this.state);
    this.sliders.forEach((s, c) => {
      s.value = "0";
      const label = this.doc.getElementById(`slider-value-${c}`);
      if (label) label.textContent = "0.00";
    });
    await this.synthesizeNow();
  }

  pinCompare(): void {
    this.state = withPin(this.state);
    const pane = this.el<HTMLElement>("pinned-pane");
    const img = this.el<HTMLImageElement>("pinned-image");
    const caption = this.el<HTMLElement>("pinned-caption");
    if (this.state.pinned) {
      pane.style.display = "";
      img.src = this.state.pinned.imageUrl;
      caption.textContent = `noise: [${this.state.pinned.noise
        .map((v) => v.toFixed(2))
        .join(", ")}]`;
    }
  }

  async synthesizeNow(): Promise<void> {
    const layoutId = this.state.layoutId;
    if (layoutId === null) return;
    const [next, id] = issueRequest(this.state);
    this.state = next;
    this.requestLog.push(id);
    try {
      const url = await this.api.synthesize(layoutId, this.state.noise.slice());
      const applied = applyResponse(this.state, id, url);
      if (applied !== this.state) {
        this.state = applied;
        this.el<HTMLImageElement>("main-image").src = url;
      }
    } catch (err) {
      this.toast(`synthesize failed: ${(err as Error).message}`);
    }
  }

  async showSweep(c: number): Promise<void> {
    if (this.state.layoutId === null) return;
    try {
      const result = await this.api.sweep(
        this.state.layoutId,
        c,
        this.opts.sweepSteps ?? DEFAULT_SWEEP,
      );
      const strip = this.el<HTMLElement>("sweep-strip");
      strip.innerHTML = "";
      result.images.forEach((b64, i) => {
        const img = this.doc.createElement("img");
        img.src = `data:image/png;base64,${b64}`;
        img.title = `n[${c}] = ${result.steps[i]}`;
        img.className = "sweep-cell";
        strip.appendChild(img);
      });
      this.el<HTMLElement>("sweep-caption").textContent =
        `sweep of class ${c}: n from ${result.steps[0]} to ${result.steps[result.steps.length - 1]}`;
    } catch (err) {
      this.toast(`sweep failed: ${(err as Error).message}`);
    }
  }

  async drawLayoutPreview(): Promise<void> {
    if (this.state.layoutId === null) return;
    try {
      const layout = await this.api.layout(this.state.layoutId);
      const canvas = this.el<HTMLCanvasElement>("layout-preview");
      canvas.width = layout.width;
      canvas.height = layout.height;
      const ctx = canvas.getContext("2d");
      if (!ctx) return;
      const img = ctx.createImageData(layout.width, layout.height);
      layout.pixels.forEach((cls, i) => {
        const [r, g, b] = layout.palette[cls] ?? [0, 0, 0];
        img.data[4 * i] = Math.round(r * 255);
        img.data[4 * i + 1] = Math.round(g * 255);
        img.data[4 * i + 2] = Math.round(b * 255);
        img.data[4 * i + 3] = 255;
      });
      ctx.putImageData(img, 0, 0);
    } catch {
      // preview is cosmetic; leave the canvas blank on failure
    }
  }

  toast(message: string): void {
    const box = this.el<HTMLElement>("toast");
    box.textContent = message;
    box.classList.add("visible");
    (this.opts.timers ?? realTimers).set(() => box.classList.remove("visible"), 2500);
  }

  private el<T extends HTMLElement>(id: string): T {
    const node = this.doc.getElementById(id);
    if (!node) throw new Error(`missing #${id} in document`);
    return node as T;
  }
}
