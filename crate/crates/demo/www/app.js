import init, { synth_spectrogram, pll_loss_breakdown, baseline_table } from "./pkg/orca_pll_demo.js";

const $ = (id) => document.getElementById(id);
const NAMES = ["T", "F", "S", "M"];

function fail(el, e) {
  el.innerHTML = "";
  const p = document.createElement("p");
  p.className = "err";
  p.textContent = String(e.message ?? e);
  el.appendChild(p);
}

function draw() {
  const info = $("spec-info");
  try {
    const img = synth_spectrogram($("beh").value, +$("snr").value, +$("dur").value, +$("seed").value >>> 0);
    const c = $("spec");
    const scale = 4;
    c.width = img.cols;
    c.height = img.rows;
    c.style.width = `${img.cols * scale}px`;
    c.style.height = `${img.rows * scale}px`;
    c.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(img.rgba()), img.cols, img.rows), 0, 0);
    info.textContent = `${img.rows} Mel bands x ${img.cols} frames`;
    img.free();
  } catch (e) {
    fail(info, e);
  }
}

function explain() {
  const out = $("loss-out");
  try {
    const logits = $("logits").value.split(/[\s,]+/).filter(Boolean).map(Number);
    const v = pll_loss_breakdown(new Float64Array(logits), $("cands").value.trim());
    const rows = [["softmax", 1], ["candidate weight", 5], ["grad, weights frozen", 9], ["grad, full", 13]];
    let html = `<p>loss = ${v[0].toFixed(6)}</p><table><tr><th></th>${NAMES.map((n) => `<th>${n}</th>`).join("")}</tr>`;
    for (const [name, off] of rows) {
      html += `<tr><th>${name}</th>${NAMES.map((_, k) => `<td>${v[off + k].toFixed(4)}</td>`).join("")}</tr>`;
    }
    out.innerHTML = html + "</table>";
  } catch (e) {
    fail(out, e);
  }
}

function baselines() {
  try {
    $("base-out").textContent = baseline_table($("counts").value);
  } catch (e) {
    $("base-out").textContent = String(e.message ?? e);
  }
}

await init();
$("draw").onclick = draw;
$("explain").onclick = explain;
$("base").onclick = baselines;
draw();
explain();
baselines();
