import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    include: ["tests/camera.test.ts", "tests/state.test.ts"],
    environment: "node",
  },
});
