/** Image input handling: base64-encoded PNG bytes or a filesystem path. */

import * as fs from "fs";
import { PNG } from "pngjs";

import { Raster } from "./model";

const PNG_BASE64_PREFIX = "iVBOR"; // base64 of the PNG magic bytes

export function decodeImageField(field: string): Raster {
  let bytes: Buffer;
  if (field.startsWith(PNG_BASE64_PREFIX)) {
    bytes = Buffer.from(field, "base64");
  } else if (field.startsWith("data:")) {
    bytes = Buffer.from(field.slice(field.indexOf(",") + 1), "base64");
  } else {
    bytes = fs.readFileSync(field);
  }
  const png = PNG.sync.read(bytes);
  const pixels = new Uint8Array(png.width * png.height * 3);
  for (let i = 0; i < png.width * png.height; i++) {
    pixels[i * 3] = png.data[i * 4];
    pixels[i * 3 + 1] = png.data[i * 4 + 1];
    pixels[i * 3 + 2] = png.data[i * 4 + 2];
  }
  return { width: png.width, height: png.height, pixels };
}
