/**
 * Wire protocol: one JSON object per line.
 *
 * request:  {"id": str, "op": "ground"|"score"|"embed", "image": base64-PNG
 *           or path, "prompt": str}
 * response: {"id", "score", "layers", "heads", "tokens", "reduced",
 *           "attn": base64 little-endian float32 row-major,
 *           "grad": base64 (absent when reduced), "embedding": [float,...]}
 * errors:   {"id": str|null, "error": str}
 */

import { z } from "zod";

import { GroundOutput, reduceHeads } from "./model";

export const RequestSchema = z.object({
  id: z.string().min(1),
  op: z.enum(["ground", "score", "embed"]),
  image: z.string().min(1),
  prompt: z.string(),
});

export type Request = z.infer<typeof RequestSchema>;

export interface SidecarConfig {
  model: string; // "tiny" | "stub"
  device: string;
  maxInFlight: number;
  reduceBeforeSend: boolean;
  seed: number;
}

export function defaultConfig(): SidecarConfig {
  return { model: "tiny", device: "cpu", maxInFlight: 1, reduceBeforeSend: false, seed: 0 };
}

function packFloat32(values: number[]): string {
  const arr = new Float32Array(values);
  return Buffer.from(arr.buffer, arr.byteOffset, arr.byteLength).toString("base64");
}

function flatten4(t: number[][][][]): number[] {
  const out: number[] = [];
  for (const l of t) for (const h of l) for (const row of h) out.push(...row);
  return out;
}

function flatten3(t: number[][][]): number[] {
  const out: number[] = [];
  for (const l of t) for (const row of l) out.push(...row);
  return out;
}

export function groundResponse(id: string, output: GroundOutput, reduce: boolean): object {
  if (reduce) {
    return {
      id,
      score: output.score,
      layers: output.layers,
      heads: output.heads,
      tokens: output.tokens,
      reduced: true,
      attn: packFloat32(flatten3(reduceHeads(output))),
    };
  }
  return {
    id,
    score: output.score,
    layers: output.layers,
    heads: output.heads,
    tokens: output.tokens,
    reduced: false,
    attn: packFloat32(flatten4(output.attn)),
    grad: packFloat32(flatten4(output.grad)),
  };
}

export function errorResponse(id: string | null, message: string): object {
  return { id, error: message };
}
