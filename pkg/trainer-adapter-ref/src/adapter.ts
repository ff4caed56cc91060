/**
 * Reference trainer adapter. The whole interface is the process contract:
 *
 *   adapter --describe
 *   adapter --config <file> --data <file> --out <dir> [--mini] [--baseline]
 *   adapter --predict <model.json> <eval_inputs.jsonl> <predictions.jsonl>
 *
 * Training writes <out>/loss.log (one `step N train_loss X eval_loss Y`
 * line per optimizer step) and <out>/manifest (JSON with a predict_cmd
 * the caller appends the eval input and output paths to). Exit codes:
 * 0 success, 2 data error, 3 resource error, 4 numerical error.
 *
 * For gate tests a config may carry {"mock": {"loss": "nan"|"explode"}}
 * to corrupt the final logged step; non-finite losses, injected or real,
 * exit 4.
 */

import { mkdirSync, readFileSync, writeFileSync } from "node:fs";
import { resolve } from "node:path";
import { parseArgs } from "node:util";
import { fileURLToPath } from "node:url";

import {
  DEFAULT_ANSWER,
  MODEL_FORMAT,
  ModelDoc,
  TinyClassifier,
  TrainExample,
  featurize,
  normalize,
  seededShuffle,
} from "./model.js";

export const EXIT_OK = 0;
export const EXIT_DATA_ERROR = 2;
export const EXIT_RESOURCE_ERROR = 3;
export const EXIT_NUMERICAL_ERROR = 4;

const FEATURE_DIM = 512;
const STEP_CAP = 50;
const MINI_SAMPLE_CAP = 16;
const MINI_STEP_CAP = 2;

// legal config ranges; --describe prints these and train() enforces them
const RANGES: Record<string, [number, number]> = {
  learning_rate: [1e-6, 1.0],
  batch_size: [1, 512],
  grad_accumulation: [1, 64],
  epochs: [1, 50],
  max_steps: [1, 10000],
  sequence_length_cap: [16, 32768],
  eval_fraction: [0.01, 0.99],
};

interface AdapterConfig {
  seed: number;
  learningRate: number;
  batchSize: number;
  epochs: number;
  maxSteps: number | null;
  model: string;
  device: string;
  mock: { loss?: string };
}

function describe(): number {
  const doc = {
    name: "reference",
    modes: ["describe", "mini", "baseline", "predict"],
    ranges: RANGES,
    model: MODEL_FORMAT,
    device: "cpu",
  };
  console.log(JSON.stringify(doc));
  return EXIT_OK;
}

function loadConfig(path: string): AdapterConfig {
  const doc = JSON.parse(readFileSync(path, "utf-8"));
  if (typeof doc !== "object" || doc === null || Array.isArray(doc)) {
    throw new Error("config must be a JSON object");
  }
  for (const [field, [lo, hi]] of Object.entries(RANGES)) {
    const value = doc[field];
    if (value === undefined || value === null) continue;
    if (typeof value !== "number" || !Number.isFinite(value) || value < lo || value > hi) {
      throw new Error(`${field} must be a number in [${lo}, ${hi}], got ${JSON.stringify(value)}`);
    }
  }
  return {
    seed: typeof doc.seed === "number" ? doc.seed : 0,
    learningRate: doc.learning_rate ?? 1e-4,
    batchSize: Math.max(1, Math.floor(doc.batch_size ?? 8)),
    epochs: Math.floor(doc.epochs ?? 1),
    maxSteps: doc.max_steps != null ? Math.floor(doc.max_steps) : null,
    model: typeof doc.model === "string" ? doc.model : MODEL_FORMAT,
    device: typeof doc.device === "string" ? doc.device : "cpu",
    mock: typeof doc.mock === "object" && doc.mock !== null ? doc.mock : {},
  };
}

function readJsonl(path: string): Record<string, unknown>[] {
  const rows: Record<string, unknown>[] = [];
  for (const line of readFileSync(path, "utf-8").split("\n")) {
    if (!line.trim()) continue;
    const doc = JSON.parse(line);
    if (typeof doc === "object" && doc !== null && !Array.isArray(doc)) {
      rows.push(doc);
    }
  }
  return rows;
}

function toExamples(rows: Record<string, unknown>[]): TrainExample[] {
  return rows.map((row) => ({
    text: normalize(String(row.instruction ?? ""), String(row.input ?? "")),
    output: String(row.output ?? ""),
  }));
}

function formatLoss(value: number): string {
  if (Number.isNaN(value)) return "NaN";
  if (!Number.isFinite(value)) return value > 0 ? "Infinity" : "-Infinity";
  return String(Math.round(value * 1e6) / 1e6);
}

function writeLossLog(outDir: string, curve: Array<[number, number]>): void {
  const lines = curve.map(
    ([train, evalLoss], step) =>
      `step ${step} train_loss ${formatLoss(train)} eval_loss ${formatLoss(evalLoss)}`
  );
  writeFileSync(resolve(outDir, "loss.log"), lines.map((l) => l + "\n").join(""), "utf-8");
}

function writeArtifact(outDir: string, doc: ModelDoc, artifactId: string, trained: number): void {
  const modelPath = resolve(outDir, "model.json");
  writeFileSync(modelPath, JSON.stringify(doc), "utf-8");
  const manifest = {
    artifact_id: artifactId,
    trained_records: trained,
    model_format: doc.format,
    predict_cmd: [process.execPath, fileURLToPath(import.meta.url), "--predict", modelPath],
  };
  writeFileSync(resolve(outDir, "manifest"), JSON.stringify(manifest, null, 2), "utf-8");
}

function train(configPath: string, dataPath: string, outDir: string, mini: boolean): number {
  let config: AdapterConfig;
  try {
    config = loadConfig(configPath);
  } catch (exc) {
    console.error(`cannot read config: ${(exc as Error).message}`);
    return EXIT_DATA_ERROR;
  }

  let examples: TrainExample[];
  try {
    examples = toExamples(readJsonl(dataPath));
  } catch (exc) {
    console.error(`cannot read data: ${(exc as Error).message}`);
    return EXIT_DATA_ERROR;
  }
  if (examples.length === 0) {
    console.error("training set is empty");
    return EXIT_DATA_ERROR;
  }

  try {
    mkdirSync(outDir, { recursive: true });
  } catch (exc) {
    console.error(`cannot create output dir: ${(exc as Error).message}`);
    return EXIT_RESOURCE_ERROR;
  }

  if (mini) examples = examples.slice(0, MINI_SAMPLE_CAP);
  const perEpoch = Math.max(1, Math.ceil(examples.length / config.batchSize));
  const steps = mini
    ? Math.min(MINI_STEP_CAP, perEpoch)
    : Math.min(STEP_CAP, config.maxSteps ?? config.epochs * perEpoch);

  const ordered = seededShuffle(examples, config.seed);
  const classes = TinyClassifier.classesOf(ordered);
  const model = new TinyClassifier(FEATURE_DIM, classes);
  const features = ordered.map((ex) => featurize(ex.text, FEATURE_DIM));
  const labels = ordered.map((ex) => classes.indexOf(ex.output));

  // config learning rates live in fine-tuning territory (1e-6..1); map them
  // onto a step size this toy objective actually moves under
  const eta = Math.min(5.0, Math.max(0.05, config.learningRate * 5000));

  const curve: Array<[number, number]> = [];
  for (let step = 0; step < steps; step++) {
    const from = (step * config.batchSize) % ordered.length;
    const batchFeatures = features.slice(from, from + config.batchSize);
    const batchLabels = labels.slice(from, from + config.batchSize);
    const trainLoss = model.step(batchFeatures, batchLabels, eta);
    const evalLoss = model.meanLoss(features, labels);
    curve.push([trainLoss, evalLoss]);
  }

  if (config.mock.loss === "nan" && curve.length > 0) {
    curve[curve.length - 1][0] = NaN;
  } else if (config.mock.loss === "explode" && curve.length > 0) {
    // overflow the way a diverging run ends: the logged loss leaves float range
    curve[curve.length - 1][0] = Number.MAX_VALUE * 16;
  }

  writeLossLog(outDir, curve);

  const numericalFailure = curve.some(([train]) => !Number.isFinite(train));
  if (!mini || !numericalFailure) {
    writeArtifact(
      outDir,
      model.toDoc(),
      `ref-${config.seed}-${ordered.length}`,
      ordered.length
    );
  }
  return numericalFailure ? EXIT_NUMERICAL_ERROR : EXIT_OK;
}

function baseline(outDir: string): number {
  try {
    mkdirSync(outDir, { recursive: true });
  } catch (exc) {
    console.error(`cannot create output dir: ${(exc as Error).message}`);
    return EXIT_RESOURCE_ERROR;
  }
  const untrained = new TinyClassifier(FEATURE_DIM, []);
  writeArtifact(outDir, untrained.toDoc(), "ref-baseline", 0);
  return EXIT_OK;
}

function predict(modelPath: string, evalPath: string, outPath: string): number {
  let model: TinyClassifier;
  let items: Record<string, unknown>[];
  try {
    model = TinyClassifier.fromDoc(JSON.parse(readFileSync(modelPath, "utf-8")));
    items = readJsonl(evalPath);
  } catch (exc) {
    console.error(`cannot read inputs: ${(exc as Error).message}`);
    return EXIT_DATA_ERROR;
  }
  const lines = items.map((item) => {
    const text = normalize(String(item.instruction ?? ""), String(item.input ?? ""));
    const output = text ? model.predictText(text) : DEFAULT_ANSWER;
    return JSON.stringify({ instance_id: String(item.instance_id ?? ""), output });
  });
  writeFileSync(outPath, lines.map((l) => l + "\n").join(""), "utf-8");
  return EXIT_OK;
}

export function main(argv: string[]): number {
  let parsed;
  try {
    parsed = parseArgs({
      args: argv,
      options: {
        config: { type: "string" },
        data: { type: "string" },
        out: { type: "string" },
        mini: { type: "boolean", default: false },
        baseline: { type: "boolean", default: false },
        describe: { type: "boolean", default: false },
        predict: { type: "string" },
      },
      allowPositionals: true,
    });
  } catch (exc) {
    console.error((exc as Error).message);
    return EXIT_DATA_ERROR;
  }
  const { values, positionals } = parsed;

  if (values.describe) return describe();
  if (values.predict) {
    if (positionals.length !== 2) {
      console.error("usage: adapter --predict <model.json> <eval_inputs.jsonl> <predictions.jsonl>");
      return EXIT_DATA_ERROR;
    }
    return predict(values.predict, positionals[0], positionals[1]);
  }
  if (values.baseline) {
    if (!values.out) {
      console.error("usage: adapter --config <file> --data <file> --out <dir> --baseline");
      return EXIT_DATA_ERROR;
    }
    return baseline(values.out);
  }
  if (!values.config || !values.data || !values.out) {
    console.error("usage: adapter --config <file> --data <file> --out <dir> [--mini]");
    return EXIT_DATA_ERROR;
  }
  return train(values.config, values.data, values.out, values.mini ?? false);
}

process.exit(main(process.argv.slice(2)));
