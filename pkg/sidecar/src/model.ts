/**
 * Tiny self-contained dual encoder.
 *
 * Images are split into a patch grid, pooled into per-patch features, and
 * pushed through a small multi-head attention stack; the matching score is
 * the cosine between the class-token embedding and a hashed bag-of-words
 * text embedding. Queries and keys read the initial token embeddings, so
 * the score as a function of the attention tensors has an exact analytic
 * gradient which the backward pass returns alongside the forward maps.
 *
 * Weights are generated from a fixed seed; identical requests produce
 * identical outputs bit for bit.
 */

import { Matrix, add, dot, matmul, normalize, scale, softmaxRows, transpose, zeros } from "./tensor";
import { gaussianMatrix, mulberry32 } from "./rng";

export interface Raster {
  width: number;
  height: number;
  pixels: Uint8Array; // RGB row-major
}

export interface GroundOutput {
  score: number;
  layers: number;
  heads: number;
  tokens: number;
  attn: number[][][][]; // [L][H][T][T]
  grad: number[][][][];
}

export interface Model {
  readonly layers: number;
  readonly heads: number;
  readonly tokens: number;
  ground(image: Raster, prompt: string): GroundOutput;
  score(image: Raster, text: string): number;
  embed(image: Raster): number[];
}

const FEATURES = 6; // three channel means, intensity spread, row, col

function fnv1a(text: string): number {
  let hash = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    hash ^= text.charCodeAt(i);
    hash = Math.imul(hash, 0x01000193) >>> 0;
  }
  return hash >>> 0;
}

export class TinyDualEncoder implements Model {
  readonly layers: number;
  readonly heads: number;
  readonly tokens: number;
  readonly gridRows: number;
  readonly gridCols: number;
  readonly dim: number;
  private readonly dk: number;
  private readonly cls: number[];
  private readonly wPatch: Matrix;
  private readonly wq: Matrix[][];
  private readonly wk: Matrix[][];
  private readonly wv: Matrix[][];

  constructor(seed = 0, layers = 2, heads = 2, gridRows = 3, gridCols = 3, dim = 16) {
    this.layers = layers;
    this.heads = heads;
    this.gridRows = gridRows;
    this.gridCols = gridCols;
    this.tokens = 1 + gridRows * gridCols;
    this.dim = dim;
    this.dk = Math.max(Math.floor(dim / heads), 1);
    const rng = mulberry32(0x5eed0000 + seed);
    this.cls = gaussianMatrix(rng, 1, dim, 0.5)[0];
    this.wPatch = gaussianMatrix(rng, FEATURES, dim, 0.5);
    this.wq = [];
    this.wk = [];
    this.wv = [];
    for (let l = 0; l < layers; l++) {
      const ql: Matrix[] = [];
      const kl: Matrix[] = [];
      const vl: Matrix[] = [];
      for (let h = 0; h < heads; h++) {
        ql.push(gaussianMatrix(rng, dim, this.dk, 0.5));
        kl.push(gaussianMatrix(rng, dim, this.dk, 0.5));
        vl.push(gaussianMatrix(rng, dim, dim, 0.3 / Math.sqrt(dim)));
      }
      this.wq.push(ql);
      this.wk.push(kl);
      this.wv.push(vl);
    }
  }

  private patchFeatures(image: Raster): Matrix {
    const { width, height, pixels } = image;
    const feats = zeros(this.gridRows * this.gridCols, FEATURES);
    for (let r = 0; r < this.gridRows; r++) {
      for (let c = 0; c < this.gridCols; c++) {
        const y0 = Math.floor((r * height) / this.gridRows);
        const y1 = Math.max(Math.floor(((r + 1) * height) / this.gridRows), y0 + 1);
        const x0 = Math.floor((c * width) / this.gridCols);
        const x1 = Math.max(Math.floor(((c + 1) * width) / this.gridCols), x0 + 1);
        let sums = [0, 0, 0];
        let sumSq = 0;
        let count = 0;
        for (let y = y0; y < y1; y++) {
          for (let x = x0; x < x1; x++) {
            const base = (y * width + x) * 3;
            for (let ch = 0; ch < 3; ch++) {
              const v = pixels[base + ch] / 255;
              sums[ch] += v;
              sumSq += v * v;
            }
            count += 1;
          }
        }
        const k = r * this.gridCols + c;
        const total = count * 3;
        const mean = (sums[0] + sums[1] + sums[2]) / total;
        feats[k][0] = sums[0] / count;
        feats[k][1] = sums[1] / count;
        feats[k][2] = sums[2] / count;
        feats[k][3] = Math.sqrt(Math.max(sumSq / total - mean * mean, 0));
        feats[k][4] = this.gridRows > 1 ? r / (this.gridRows - 1) : 0;
        feats[k][5] = this.gridCols > 1 ? c / (this.gridCols - 1) : 0;
      }
    }
    return feats;
  }

  private tokenEmbeddings(image: Raster): Matrix {
    const patches = matmul(this.patchFeatures(image), this.wPatch);
    return [this.cls.slice(), ...patches];
  }

  private textEmbedding(text: string): number[] {
    const vec = new Array<number>(this.dim).fill(0);
    const words = text.toLowerCase().match(/[a-z0-9]+/g) ?? [];
    const extras = Array.from(text.toLowerCase()).filter((ch) => ch.charCodeAt(0) > 127);
    for (const token of [...words, ...extras]) {
      const h = fnv1a(token);
      const sign = (h & 0x80000000) === 0 ? 1 : -1;
      vec[h % this.dim] += sign;
    }
    if (!vec.some((v) => v !== 0)) return normalize(new Array<number>(this.dim).fill(1));
    return normalize(vec);
  }

  private attention(x0: Matrix): Matrix[][] {
    const attn: Matrix[][] = [];
    for (let l = 0; l < this.layers; l++) {
      const perHead: Matrix[] = [];
      for (let h = 0; h < this.heads; h++) {
        const q = matmul(x0, this.wq[l][h]);
        const k = matmul(x0, this.wk[l][h]);
        perHead.push(softmaxRows(scale(matmul(q, transpose(k)), 1 / Math.sqrt(this.dk))));
      }
      attn.push(perHead);
    }
    return attn;
  }

  /** Runs the value path, returning the state before each layer plus the final one. */
  private valuePass(x0: Matrix, attn: Matrix[][]): Matrix[] {
    const states = [x0];
    let x = x0;
    for (let l = 0; l < this.layers; l++) {
      let mix = zeros(this.tokens, this.dim);
      for (let h = 0; h < this.heads; h++) {
        mix = add(mix, matmul(attn[l][h], matmul(x, this.wv[l][h])));
      }
      x = add(x, scale(mix, 1 / this.heads));
      states.push(x);
    }
    return states;
  }

  private scoreFromState(finalState: Matrix, textVec: number[]): number {
    return dot(normalize(finalState[0]), textVec);
  }

  /** Score with an explicit attention stack; used by the gradient check. */
  scoreGivenAttention(image: Raster, text: string, attn: Matrix[][]): number {
    const x0 = this.tokenEmbeddings(image);
    const states = this.valuePass(x0, attn);
    return this.scoreFromState(states[states.length - 1], this.textEmbedding(text));
  }

  private backward(states: Matrix[], attn: Matrix[][], textVec: number[]): number[][][][] {
    const T = this.tokens;
    const u = states[states.length - 1][0];
    const n = Math.sqrt(dot(u, u));
    const uHat = u.map((v) => v / n);
    const along = dot(uHat, textVec);
    const dU = textVec.map((t, i) => (t - along * uHat[i]) / n);

    let G = zeros(T, this.dim);
    G[0] = dU.slice();
    const grad: number[][][][] = [];
    for (let l = 0; l < this.layers; l++) grad.push([]);

    for (let l = this.layers - 1; l >= 0; l--) {
      const xIn = states[l];
      const gNext = G.map((row) => row.slice());
      for (let h = 0; h < this.heads; h++) {
        const v = matmul(xIn, this.wv[l][h]);
        grad[l][h] = scale(matmul(gNext, transpose(v)), 1 / this.heads);
        const correction = scale(matmul(transpose(attn[l][h]), matmul(gNext, transpose(this.wv[l][h]))), 1 / this.heads);
        G = add(G, correction);
      }
    }
    return grad;
  }

  ground(image: Raster, prompt: string): GroundOutput {
    const x0 = this.tokenEmbeddings(image);
    const attn = this.attention(x0);
    const states = this.valuePass(x0, attn);
    const textVec = this.textEmbedding(prompt);
    const score = this.scoreFromState(states[states.length - 1], textVec);
    const grad = this.backward(states, attn, textVec);
    return { score, layers: this.layers, heads: this.heads, tokens: this.tokens, attn, grad };
  }

  score(image: Raster, text: string): number {
    const x0 = this.tokenEmbeddings(image);
    const states = this.valuePass(x0, this.attention(x0));
    return this.scoreFromState(states[states.length - 1], this.textEmbedding(text));
  }

  embed(image: Raster): number[] {
    const x0 = this.tokenEmbeddings(image);
    const states = this.valuePass(x0, this.attention(x0));
    return normalize(states[states.length - 1][0]);
  }
}

/** Canned model for protocol conformance tests: valid shapes, fixed values. */
export class StubModel implements Model {
  readonly layers = 1;
  readonly heads = 1;
  readonly tokens = 5;

  ground(_image: Raster, _prompt: string): GroundOutput {
    const T = this.tokens;
    const attn = [[Array.from({ length: T }, () => new Array<number>(T).fill(1 / T))]];
    const grad = [[Array.from({ length: T }, () => new Array<number>(T).fill(0.01))]];
    return { score: 0.5, layers: 1, heads: 1, tokens: T, attn, grad };
  }

  score(_image: Raster, _text: string): number {
    return 0.5;
  }

  embed(_image: Raster): number[] {
    const v = new Array<number>(8).fill(0);
    v[0] = 1;
    return v;
  }
}

/** Head reduction: mean over heads of the clamped grad-attention product. */
export function reduceHeads(output: GroundOutput): number[][][] {
  const { layers, heads, tokens, attn, grad } = output;
  const abar: number[][][] = [];
  for (let l = 0; l < layers; l++) {
    const layer = zeros(tokens, tokens);
    for (let h = 0; h < heads; h++) {
      for (let i = 0; i < tokens; i++) {
        for (let j = 0; j < tokens; j++) {
          layer[i][j] += Math.max(grad[l][h][i][j] * attn[l][h][i][j], 0) / heads;
        }
      }
    }
    abar.push(layer);
  }
  return abar;
}
