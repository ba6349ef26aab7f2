// Deterministic text embeddings: a stable 64-bit hash of the text seeds a
// PRNG, Box-Muller turns its stream into standard normals, and the vector
// is L2-normalized. Same text -> bitwise-identical unit vector, distinct
// texts -> near-orthogonal vectors. Stands in for a real sentence encoder
// whose weights are not shipped with this repo.

export const EMBEDDING_DIM = 384;

// FNV-1a over UTF-8 bytes, 64-bit via BigInt.
function hash64(text: string): bigint {
  const bytes = new TextEncoder().encode(text);
  let h = 0xcbf29ce484222325n;
  const prime = 0x100000001b3n;
  const mask = 0xffffffffffffffffn;
  for (const b of bytes) {
    h ^= BigInt(b);
    h = (h * prime) & mask;
  }
  return h;
}

// splitmix64: solid small PRNG, seedable from the text hash.
function splitmix64(seed: bigint): () => number {
  const mask = 0xffffffffffffffffn;
  let state = seed;
  return () => {
    state = (state + 0x9e3779b97f4a7c15n) & mask;
    let z = state;
    z = ((z ^ (z >> 30n)) * 0xbf58476d1ce4e5b9n) & mask;
    z = ((z ^ (z >> 27n)) * 0x94d049bb133111ebn) & mask;
    z = z ^ (z >> 31n);
    // 53 random bits -> double in [0, 1)
    return Number(z >> 11n) / 2 ** 53;
  };
}

export function embedText(text: string, dim: number = EMBEDDING_DIM): number[] {
  const next = splitmix64(hash64(text));
  const values = new Array<number>(dim);
  for (let i = 0; i < dim; i += 2) {
    // Box-Muller; u1 must be strictly positive
    const u1 = next() || Number.MIN_VALUE;
    const u2 = next();
    const r = Math.sqrt(-2 * Math.log(u1));
    values[i] = r * Math.cos(2 * Math.PI * u2);
    if (i + 1 < dim) values[i + 1] = r * Math.sin(2 * Math.PI * u2);
  }
  let norm = 0;
  for (const v of values) norm += v * v;
  norm = Math.sqrt(norm);
  return values.map((v) => v / norm);
}
