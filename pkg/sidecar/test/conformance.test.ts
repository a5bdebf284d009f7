import * as fs from "fs";
import * as path from "path";
import { describe, expect, it } from "vitest";

import { StubModel } from "../src/model";
import { defaultConfig } from "../src/protocol";
import { handleLine } from "../src/server";

const FIXTURE = path.join(__dirname, "..", "..", "conformance", "requests.jsonl");

describe("shared conformance fixture", () => {
  const lines = fs.readFileSync(FIXTURE, "utf-8").split("\n").filter(Boolean);
  const stub = new StubModel();

  for (const reduce of [false, true]) {
    it(`every request line yields one parsable response (reduce=${reduce})`, () => {
      const config = { ...defaultConfig(), reduceBeforeSend: reduce };
      const responses = lines.map((line) => handleLine(line, stub, config));
      for (const raw of responses) {
        const parsed = JSON.parse(raw);
        const isError = typeof parsed.error === "string";
        if (isError) {
          expect(parsed).toHaveProperty("id");
        } else {
          expect(typeof parsed.id).toBe("string");
          const hasScore = typeof parsed.score === "number";
          const hasEmbedding = Array.isArray(parsed.embedding);
          expect(hasScore || hasEmbedding).toBe(true);
        }
      }
      // identical ground requests agree byte for byte
      const byId: Record<string, string> = {};
      responses.forEach((raw) => {
        const parsed = JSON.parse(raw);
        if (parsed.id) byId[parsed.id] = raw;
      });
      expect(byId.g1.replace('"id":"g1"', "")).toBe(byId.g2.replace('"id":"g2"', ""));
      expect(JSON.parse(byId.x1).error).toBeDefined();
      expect(JSON.parse(byId.x2).error).toBeDefined();
    });
  }
});
