/** Thin client for the inference service HTTP API. */
import type { ClassifyResponse, MedicineDetail, MedicineSummary } from "./types.js";

export class ServiceClient {
  constructor(private readonly baseUrl: string) {}

  async classify(frame: Blob): Promise<ClassifyResponse> {
    const res = await fetch(`${this.baseUrl}/v1/classify`, {
      method: "POST",
      headers: { "content-type": frame.type || "image/jpeg" },
      body: frame,
    });
    if (!res.ok) throw new Error(`classify failed: HTTP ${res.status}`);
    return (await res.json()) as ClassifyResponse;
  }

  async medicine(id: string): Promise<MedicineDetail> {
    const res = await fetch(`${this.baseUrl}/v1/medicines/${encodeURIComponent(id)}`);
    if (!res.ok) throw new Error(`medicine lookup failed: HTTP ${res.status}`);
    return (await res.json()) as MedicineDetail;
  }

  async catalog(): Promise<MedicineSummary[]> {
    const res = await fetch(`${this.baseUrl}/v1/medicines`);
    if (!res.ok) throw new Error(`catalog failed: HTTP ${res.status}`);
    return (await res.json()) as MedicineSummary[];
  }
}
