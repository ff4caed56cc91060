/**
 * A deliberately tiny supervised learner: softmax regression over hashed
 * character trigrams, trained with plain SGD on cross-entropy. Around
 * dim * classes parameters (tens of thousands on the toy data), so a full
 * run is comfortably a CPU job. Everything is seeded and float64, which
 * makes retraining on identical inputs byte-identical.
 */

export interface TrainExample {
  text: string;
  output: string;
}

export interface ModelDoc {
  format: string;
  dim: number;
  default: string;
  classes: string[];
  weights: number[];
  bias: number[];
}

export const MODEL_FORMAT = "char-trigram-softmax";
export const DEFAULT_ANSWER = "unknown";

export function normalize(instruction: string, input: string = ""): string {
  return `${instruction} ${input}`.toLowerCase().replace(/\s+/g, " ").trim();
}

// FNV-1a, 32-bit: stable across platforms, good enough for feature hashing
function fnv1a(text: string): number {
  let hash = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    hash ^= text.charCodeAt(i);
    hash = Math.imul(hash, 0x01000193);
  }
  return hash >>> 0;
}

export function featurize(text: string, dim: number): Float64Array {
  const x = new Float64Array(dim);
  const padded = text.length >= 3 ? text : ` ${text} `;
  let grams = 0;
  for (let i = 0; i + 3 <= padded.length; i++) {
    x[fnv1a(padded.slice(i, i + 3)) % dim] += 1;
    grams++;
  }
  if (grams > 0) {
    // L2 normalization keeps one step size sane across text lengths
    let norm = 0;
    for (let i = 0; i < dim; i++) norm += x[i] * x[i];
    norm = Math.sqrt(norm);
    for (let i = 0; i < dim; i++) x[i] /= norm;
  }
  return x;
}

// mulberry32: small seeded PRNG; Math.random() cannot be seeded
export function mulberry32(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state + 0x6d2b79f5) >>> 0;
    let t = state;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

export function seededShuffle<T>(items: T[], seed: number): T[] {
  const out = items.slice();
  const rand = mulberry32(seed);
  for (let i = out.length - 1; i > 0; i--) {
    const j = Math.floor(rand() * (i + 1));
    [out[i], out[j]] = [out[j], out[i]];
  }
  return out;
}

export class TinyClassifier {
  readonly dim: number;
  readonly classes: string[];
  readonly defaultAnswer: string;
  weights: Float64Array; // classes.length rows of dim
  bias: Float64Array;

  constructor(dim: number, classes: string[], defaultAnswer: string = DEFAULT_ANSWER) {
    this.dim = dim;
    this.classes = classes;
    this.defaultAnswer = defaultAnswer;
    this.weights = new Float64Array(classes.length * dim);
    this.bias = new Float64Array(classes.length);
  }

  static classesOf(examples: TrainExample[]): string[] {
    const seen = new Set<string>();
    const classes: string[] = [];
    for (const ex of examples) {
      if (!seen.has(ex.output)) {
        seen.add(ex.output);
        classes.push(ex.output);
      }
    }
    return classes;
  }

  private logits(x: Float64Array): Float64Array {
    const out = new Float64Array(this.classes.length);
    for (let c = 0; c < this.classes.length; c++) {
      let z = this.bias[c];
      const row = c * this.dim;
      for (let i = 0; i < this.dim; i++) z += this.weights[row + i] * x[i];
      out[c] = z;
    }
    return out;
  }

  private probabilities(x: Float64Array): Float64Array {
    const z = this.logits(x);
    let max = -Infinity;
    for (const v of z) if (v > max) max = v;
    let sum = 0;
    for (let c = 0; c < z.length; c++) {
      z[c] = Math.exp(z[c] - max);
      sum += z[c];
    }
    for (let c = 0; c < z.length; c++) z[c] /= sum;
    return z;
  }

  meanLoss(features: Float64Array[], labels: number[]): number {
    let total = 0;
    for (let n = 0; n < features.length; n++) {
      const p = this.probabilities(features[n])[labels[n]];
      total += -Math.log(Math.max(p, 1e-12));
    }
    return total / Math.max(1, features.length);
  }

  /** One SGD step on the batch; returns the batch loss before the update. */
  step(features: Float64Array[], labels: number[], eta: number): number {
    const loss = this.meanLoss(features, labels);
    const m = Math.max(1, features.length);
    for (let n = 0; n < features.length; n++) {
      const x = features[n];
      const probs = this.probabilities(x);
      for (let c = 0; c < this.classes.length; c++) {
        const err = (probs[c] - (c === labels[n] ? 1 : 0)) / m;
        if (err === 0) continue;
        const row = c * this.dim;
        const scale = eta * err;
        for (let i = 0; i < this.dim; i++) this.weights[row + i] -= scale * x[i];
        this.bias[c] -= scale;
      }
    }
    return loss;
  }

  predictText(text: string): string {
    if (this.classes.length === 0) return this.defaultAnswer;
    const probs = this.probabilities(featurize(normalize(text), this.dim));
    let best = 0;
    for (let c = 1; c < probs.length; c++) if (probs[c] > probs[best]) best = c;
    return this.classes[best];
  }

  toDoc(): ModelDoc {
    return {
      format: MODEL_FORMAT,
      dim: this.dim,
      default: this.defaultAnswer,
      classes: this.classes,
      weights: Array.from(this.weights),
      bias: Array.from(this.bias),
    };
  }

  static fromDoc(doc: ModelDoc): TinyClassifier {
    if (doc.format !== MODEL_FORMAT) {
      throw new Error(`unsupported model format: ${doc.format}`);
    }
    const model = new TinyClassifier(doc.dim, doc.classes, doc.default);
    model.weights = Float64Array.from(doc.weights);
    model.bias = Float64Array.from(doc.bias);
    return model;
  }
}
