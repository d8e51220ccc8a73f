import init, { parameterAudit, Demo } from "./pkg/apvt_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const fmt = (n) => n.toLocaleString("en-US");

let demo = null;
let query = [0, 0];

function status(text) {
  $("status").textContent = text;
}

function runAudit() {
  try {
    const r = JSON.parse(parameterAudit($("a-depths").value, num("a-paths"), num("a-head"), num("a-classes")));
    const rows = r.variants.map((v) => {
      const off = Math.abs(v.deviation_percent) > 3 ? ' class="off"' : "";
      return `<tr><td>${v.name}</td><td>${v.depths.join(",")}</td><td>${v.paths}</td><td>${v.head_dim}</td>` +
        `<td>${fmt(v.total)}</td><td>${v.published_millions.toFixed(2)}M</td>` +
        `<td${off}>${v.deviation_percent >= 0 ? "+" : ""}${v.deviation_percent.toFixed(2)}%</td></tr>`;
    });
    $("a-variants").innerHTML =
      "<table><tr><th>variant</th><th>depths</th><th>paths</th><th>head dim</th><th>built</th><th>published</th><th>deviation</th></tr>" +
      rows.join("") + "</table>" +
      `<p>8-4x-a / 8-2x-a = ${r.width_ratio.toFixed(3)}, 8-2x-b / 8-2x-a = ${r.head_dim_ratio.toFixed(3)}</p>`;
    const c = r.custom;
    const stageRows = c.stages.map((s, i) =>
      `<tr><td>stage ${i + 1}</td><td>${fmt(s.patch_embed)}</td><td>${fmt(s.pos_embed)}</td>` +
      `<td>${fmt(s.encoder_shared)}</td><td>${fmt(s.encoder_paths)}</td><td>${fmt(s.norm)}</td><td>${fmt(s.total)}</td></tr>`);
    $("a-custom").innerHTML =
      "<table><tr><th>custom</th><th>patch embed</th><th>pos embed</th><th>shared</th><th>paths</th><th>norm</th><th>total</th></tr>" +
      stageRows.join("") +
      `<tr><td>head</td><td colspan="6">${fmt(c.head)}</td></tr>` +
      `<tr><th>total</th><th colspan="6">${fmt(c.total)}</th></tr></table>`;
  } catch (e) {
    $("a-custom").textContent = String(e);
  }
}

function heat(t) {
  const r = Math.round(255 * Math.min(1, 1.5 * t));
  const g = Math.round(255 * Math.max(0, Math.min(1, 1.5 * t - 0.5)));
  const b = Math.round(255 * Math.max(0, 2 * t - 1));
  return `rgb(${r},${g},${b})`;
}

function paintGrid(canvas, [h, w], values, lo, hi, mark) {
  const ctx = canvas.getContext("2d");
  const cw = canvas.width / w;
  const ch = canvas.height / h;
  const span = hi - lo || 1;
  for (let y = 0; y < h; y++) {
    for (let x = 0; x < w; x++) {
      ctx.fillStyle = heat((values[y * w + x] - lo) / span);
      ctx.fillRect(x * cw, y * ch, Math.ceil(cw), Math.ceil(ch));
    }
  }
  if (mark) {
    ctx.strokeStyle = "#0af";
    ctx.lineWidth = 2;
    ctx.strokeRect(mark[1] * cw + 1, mark[0] * ch + 1, cw - 2, ch - 2);
  }
}

function drawImage(canvas, rgba) {
  const tmp = document.createElement("canvas");
  tmp.width = tmp.height = 32;
  tmp.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), 32, 32), 0, 0);
  const ctx = canvas.getContext("2d");
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(tmp, 0, 0, canvas.width, canvas.height);
}

function runAttention() {
  if (!demo) return;
  try {
    const stage = num("h-stage") - 1;
    const grid = demo.inputSize() / [4, 8, 16, 32][stage];
    query = query.map((q) => Math.min(q, grid - 1));
    const h = JSON.parse(demo.attention(stage, num("h-block"), num("h-path"), num("h-head"), query[0], query[1]));
    const q = $("h-query");
    drawImage(q, demo.imageRgba());
    const ctx = q.getContext("2d");
    ctx.strokeStyle = "rgba(255,255,255,0.35)";
    const cell = q.width / h.grid[1];
    for (let i = 1; i < h.grid[1]; i++) {
      ctx.beginPath(); ctx.moveTo(i * cell, 0); ctx.lineTo(i * cell, q.height); ctx.stroke();
      ctx.beginPath(); ctx.moveTo(0, i * cell); ctx.lineTo(q.width, i * cell); ctx.stroke();
    }
    ctx.strokeStyle = "#0af";
    ctx.lineWidth = 3;
    ctx.strokeRect(h.query[1] * cell, h.query[0] * cell, cell, cell);
    ctx.lineWidth = 1;
    const lo = Math.min(...h.weights);
    const hi = Math.max(...h.weights);
    paintGrid($("h-map"), h.kv_grid, h.weights, lo, hi, null);
    $("h-info").textContent =
      `query grid ${h.grid[0]}x${h.grid[1]}, reduction ${h.reduction}, key/value grid ${h.kv_grid[0]}x${h.kv_grid[1]}, ` +
      `${h.heads} heads, ${h.paths} paths, ${h.blocks} blocks; weights ${lo.toFixed(4)} to ${hi.toFixed(4)}`;
  } catch (e) {
    $("h-info").textContent = String(e);
  }
}

function runEnergy() {
  if (!demo) return;
  const maps = JSON.parse(demo.energy());
  const host = $("e-maps");
  host.innerHTML = "";
  for (const m of maps) {
    const fig = document.createElement("figure");
    const c = document.createElement("canvas");
    c.width = c.height = 160;
    paintGrid(c, m.grid, m.values, m.min, m.max, null);
    const cap = document.createElement("figcaption");
    cap.textContent = `stage ${m.stage + 1}: ${m.grid[0]}x${m.grid[1]}x${m.channels}, ${m.min.toFixed(2)} to ${m.max.toFixed(2)}`;
    fig.append(c, cap);
    host.append(fig);
  }
}

function build() {
  status("building model...");
  setTimeout(() => {
    try {
      const t0 = performance.now();
      demo?.free();
      demo = new Demo($("m-variant").value, num("m-size"), num("m-class"), num("m-seed"));
      drawImage($("m-image"), demo.imageRgba());
      runAttention();
      runEnergy();
      status(`ready (${(performance.now() - t0).toFixed(0)} ms)`);
    } catch (e) {
      demo = null;
      status(String(e));
    }
  }, 0);
}

async function loadCheckpoint(ev) {
  const file = ev.target.files[0];
  if (!demo || !file) return;
  try {
    demo.loadCheckpoint(new Uint8Array(await file.arrayBuffer()));
    runAttention();
    runEnergy();
    status(`loaded ${file.name}`);
  } catch (e) {
    status(String(e));
  }
  ev.target.value = "";
}

await init();
$("a-run").onclick = runAudit;
$("m-build").onclick = build;
$("m-ckpt").onchange = loadCheckpoint;
for (const id of ["h-stage", "h-block", "h-path", "h-head"]) $(id).onchange = runAttention;
$("h-query").onclick = (ev) => {
  if (!demo) return;
  const stage = num("h-stage") - 1;
  const grid = demo.inputSize() / [4, 8, 16, 32][stage];
  const rect = ev.target.getBoundingClientRect();
  query = [Math.floor(((ev.clientY - rect.top) / rect.height) * grid), Math.floor(((ev.clientX - rect.left) / rect.width) * grid)];
  runAttention();
};
runAudit();
build();
