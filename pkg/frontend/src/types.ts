/** Wire types mirroring the inference service JSON. */

export interface TopEntry {
  class_index: number;
  medicine_id: string;
  confidence: number;
}

export interface MedicineSummary {
  id: string;
  name: string;
  class_index: number;
  posology: string;
}

export interface ClassifyResponse {
  status: "recognized" | "below_threshold";
  latency_ms: number;
  threshold: number;
  top?: TopEntry[];
  suppressed_top?: TopEntry[];
  medicine?: MedicineSummary;
}

export interface MedicineDetail extends MedicineSummary {
  pil: {
    usage: string;
    warnings: string;
    interactions: string;
  };
}
