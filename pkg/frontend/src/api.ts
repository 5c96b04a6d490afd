export interface Meta {
  class_count: number;
  class_names: string[];
  layout_ids: string[];
  image_size: number;
}

export interface LayoutData {
  width: number;
  height: number;
  pixels: number[];
  palette: number[][];
}

export interface SweepResult {
  format: string;
  class: number;
  steps: number[];
  images: string[]; // base64 PNG
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/** Thin typed client over the inference server; fetch is injectable so
 * tests can drive the UI without a live server. */
export class StudioApi {
  constructor(
    private baseUrl: string,
    private fetchFn: FetchLike = (u, i) => fetch(u, i),
  ) {}

  private async getJson<T>(path: string): Promise<T> {
    const res = await this.fetchFn(this.baseUrl + path);
    if (!res.ok) throw new Error(`GET ${path} -> ${res.status}`);
    return (await res.json()) as T;
  }

  meta(): Promise<Meta> {
    return this.getJson<Meta>("/api/meta");
  }

  layout(id: string): Promise<LayoutData> {
    return this.getJson<LayoutData>(`/api/layout/${id}`);
  }

  /** Returns a displayable object URL for the synthesized PNG. */
  async synthesize(layoutId: string, noise: number[]): Promise<string> {
    const res = await this.fetchFn(this.baseUrl + "/api/synthesize", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ layout_id: layoutId, noise }),
    });
    if (!res.ok) throw new Error(`synthesize -> ${res.status}`);
    const blob = await res.blob();
    return URL.createObjectURL(blob);
  }

  async sweep(layoutId: string, cls: number, steps: number[]): Promise<SweepResult> {
    const res = await this.fetchFn(this.baseUrl + "/api/sweep", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ layout_id: layoutId, class: cls, steps }),
    });
    if (!res.ok) throw new Error(`sweep -> ${res.status}`);
    return (await res.json()) as SweepResult;
  }
}
