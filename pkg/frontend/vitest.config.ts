import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["tests/**/*.test.ts"],
    fileParallelism: false, // the protocol test saturates the CPU with training
    testTimeout: 20_000,
    hookTimeout: 600_000,
  },
});
