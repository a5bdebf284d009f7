/** Request loop: stdio by default, TCP when configured. */

import * as net from "net";
import * as readline from "readline";

import { Model } from "./model";
import { RequestSchema, SidecarConfig, errorResponse, groundResponse } from "./protocol";
import { decodeImageField } from "./png";

export function handleLine(line: string, model: Model, config: SidecarConfig): string {
  let parsed: unknown;
  try {
    parsed = JSON.parse(line);
  } catch {
    return JSON.stringify(errorResponse(null, "unparsable request line"));
  }
  const result = RequestSchema.safeParse(parsed);
  if (!result.success) {
    const id = typeof (parsed as any)?.id === "string" ? (parsed as any).id : null;
    return JSON.stringify(errorResponse(id, `invalid request: ${result.error.issues[0]?.message ?? "schema"}`));
  }
  const request = result.data;
  try {
    const image = decodeImageField(request.image);
    if (request.op === "ground") {
      return JSON.stringify(groundResponse(request.id, model.ground(image, request.prompt), config.reduceBeforeSend));
    }
    if (request.op === "score") {
      return JSON.stringify({ id: request.id, score: model.score(image, request.prompt) });
    }
    return JSON.stringify({ id: request.id, embedding: model.embed(image) });
  } catch (err) {
    return JSON.stringify(errorResponse(request.id, err instanceof Error ? err.message : String(err)));
  }
}

export function serveStdio(model: Model, config: SidecarConfig): void {
  const rl = readline.createInterface({ input: process.stdin, terminal: false });
  rl.on("line", (line: string) => {
    if (!line.trim()) return;
    process.stdout.write(handleLine(line, model, config) + "\n");
  });
  process.stderr.write(`sidecar ready (model=${config.model}, reduce=${config.reduceBeforeSend})\n`);
}

export function serveTcp(model: Model, config: SidecarConfig, port: number): net.Server {
  const server = net.createServer((socket) => {
    const rl = readline.createInterface({ input: socket, terminal: false });
    rl.on("line", (line: string) => {
      if (!line.trim()) return;
      socket.write(handleLine(line, model, config) + "\n");
    });
  });
  server.listen(port, "127.0.0.1", () => {
    process.stderr.write(`sidecar listening on tcp ${port}\n`);
  });
  return server;
}
