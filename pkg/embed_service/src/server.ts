import express, { Express } from "express";
import { z } from "zod";
import { EMBEDDING_DIM, embedText } from "./embedding.js";

export const MAX_TEXTS = 256;
export const MAX_TEXT_LENGTH = 512;

const embedRequestSchema = z.object({
  texts: z
    .array(z.string().min(1).max(MAX_TEXT_LENGTH))
    .min(1)
    .max(MAX_TEXTS),
});

export interface ServiceOptions {
  modelName?: string;
  warmupMs?: number; // simulated model-load time before /health goes 200
}

export function createApp(options: ServiceOptions = {}): Express {
  const modelName = options.modelName ?? process.env.EMBED_MODEL ?? "hash-embed";
  const modelVersion = `${modelName}-v1`;
  const warmupMs = options.warmupMs ?? Number(process.env.EMBED_WARMUP_MS ?? 100);

  let ready = false;
  setTimeout(() => {
    ready = true;
  }, warmupMs);

  const app = express();
  app.use(express.json({ limit: "1mb" }));

  app.get("/health", (_req, res) => {
    if (!ready) {
      res.status(503).json({ status: "loading", model_version: modelVersion });
      return;
    }
    res.json({ status: "ok", model_version: modelVersion });
  });

  app.post("/embed", (req, res) => {
    if (!ready) {
      res.status(503).json({ error: "model is loading" });
      return;
    }
    const parsed = embedRequestSchema.safeParse(req.body);
    if (!parsed.success) {
      res.status(400).json({
        error: `invalid request: expected 1..${MAX_TEXTS} non-empty texts of at most ${MAX_TEXT_LENGTH} characters`,
        details: parsed.error.issues.map((i) => i.message),
      });
      return;
    }
    const vectors = parsed.data.texts.map((text) => embedText(text, EMBEDDING_DIM));
    res.json({ vectors, model_version: modelVersion });
  });

  return app;
}
