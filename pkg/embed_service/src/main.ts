import { createApp } from "./server.js";

const port = Number(process.env.EMBED_PORT ?? 8787);
const app = createApp();
app.listen(port, () => {
  console.log(`embed-service listening on :${port}`);
});
