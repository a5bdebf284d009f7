import { Model, StubModel, TinyDualEncoder } from "./model";
import { defaultConfig } from "./protocol";
import { serveStdio, serveTcp } from "./server";

function usage(): never {
  process.stderr.write(
    "usage: main.js [--stub] [--reduce] [--seed N] [--grid MxN] [--tcp PORT]\n",
  );
  process.exit(2);
}

function main(argv: string[]): void {
  const config = defaultConfig();
  let tcpPort: number | null = null;
  let gridRows = 3;
  let gridCols = 3;

  for (let i = 0; i < argv.length; i++) {
    const arg = argv[i];
    if (arg === "--stub") config.model = "stub";
    else if (arg === "--reduce") config.reduceBeforeSend = true;
    else if (arg === "--seed") config.seed = parseInt(argv[++i], 10);
    else if (arg === "--tcp") tcpPort = parseInt(argv[++i], 10);
    else if (arg === "--grid") {
      const [m, n] = argv[++i].split("x").map((v) => parseInt(v, 10));
      if (!m || !n) usage();
      gridRows = m;
      gridCols = n;
    } else usage();
  }

  let model: Model;
  try {
    model = config.model === "stub" ? new StubModel() : new TinyDualEncoder(config.seed, 2, 2, gridRows, gridCols);
  } catch (err) {
    process.stderr.write(`model load failed: ${err}\n`);
    process.exit(1);
  }

  if (tcpPort !== null) serveTcp(model, config, tcpPort);
  else serveStdio(model, config);
}

main(process.argv.slice(2));
