import { readFileSync } from 'node:fs';
import * as path from 'node:path';
import { fileURLToPath } from 'node:url';

export interface ServerInfo {
  baseUrl: string;
  corpusDir: string;
}

const CACHE_DIR = path.join(path.dirname(fileURLToPath(import.meta.url)), '..', '.test-cache');

export function readServerInfo(): ServerInfo {
  return JSON.parse(readFileSync(path.join(CACHE_DIR, 'server.json'), 'utf-8'));
}

/** id -> class label, parsed from the corpus manifest. */
export function labelsFromManifest(corpusDir: string): Map<string, string> {
  const lines = readFileSync(path.join(corpusDir, 'manifest.tsv'), 'utf-8').trimEnd().split('\n');
  const labels = new Map<string, string>();
  for (const line of lines.slice(2)) {
    const [id, , label] = line.split('\t');
    labels.set(id, label);
  }
  return labels;
}

export function imagePath(corpusDir: string, relative: string): string {
  return path.join(corpusDir, relative);
}

export function idsWithLabel(labels: Map<string, string>, label: string): string[] {
  return [...labels.entries()].filter(([, l]) => l === label).map(([id]) => id).sort();
}

/** Minimal localStorage stand-in for tests that remount the app. */
export function memoryStorage(): Storage {
  const map = new Map<string, string>();
  return {
    get length() {
      return map.size;
    },
    clear: () => map.clear(),
    getItem: (key: string) => map.get(key) ?? null,
    key: (index: number) => [...map.keys()][index] ?? null,
    removeItem: (key: string) => void map.delete(key),
    setItem: (key: string, value: string) => void map.set(key, value),
  };
}

export async function waitFor<T>(
  probe: () => T | Promise<T>,
  { timeout = 30_000, interval = 100 }: { timeout?: number; interval?: number } = {},
): Promise<T> {
  const deadline = Date.now() + timeout;
  let lastError: unknown = new Error('waitFor: never sampled');
  for (;;) {
    try {
      const value = await probe();
      if (value) return value;
      lastError = new Error(`waitFor: probe returned ${String(value)}`);
    } catch (error) {
      lastError = error;
    }
    if (Date.now() > deadline) throw lastError;
    await new Promise((r) => setTimeout(r, interval));
  }
}
