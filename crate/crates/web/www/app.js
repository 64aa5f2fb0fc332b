import init, { scheduleCurve, scaleAfter, mmdExplore, renderClass, classCount } from "./pkg/sggan_web.js";

const $ = (id) => document.getElementById(id);

function drawCurve() {
  const ipe = Math.max(1, Number($("ipe").value));
  const iter = Number($("iter").value);
  const epochs = Number($("iter").max) / ipe;
  const pts = scheduleCurve(Math.max(epochs, 1), 200);
  const c = $("curve");
  const g = c.getContext("2d");
  const pad = 30;
  const sx = (t) => pad + (t / pts[pts.length - 2]) * (c.width - 2 * pad);
  const sy = (w) => c.height - pad - w * (c.height - 2 * pad);
  g.clearRect(0, 0, c.width, c.height);
  g.strokeStyle = "#bbb";
  g.strokeRect(pad, pad, c.width - 2 * pad, c.height - 2 * pad);
  g.fillStyle = "#555";
  g.fillText("0", pad - 12, sy(0) + 4);
  g.fillText("1", pad - 12, sy(1) + 4);
  g.fillText("epochs", c.width - pad - 36, c.height - 8);
  g.strokeStyle = "#1f5fa8";
  g.beginPath();
  for (let i = 0; i < pts.length; i += 2) {
    const f = i === 0 ? "moveTo" : "lineTo";
    g[f](sx(pts[i]), sy(pts[i + 1]));
  }
  g.stroke();
  const w = scaleAfter(iter, ipe);
  g.fillStyle = "#c0392b";
  g.beginPath();
  g.arc(sx(iter / ipe), sy(w), 4, 0, 2 * Math.PI);
  g.fill();
  $("wout").textContent = `t = ${(iter / ipe).toFixed(3)} epochs, w = ${w.toFixed(4)}`;
}

function drawCloud() {
  const n = Number($("points").value);
  const out = mmdExplore(n, n, Number($("shift").value), Number($("spread").value), Number($("seed").value) >>> 0);
  const [lin, gau, sigma] = out;
  $("mmdout").textContent =
    `linear MMD² = ${lin.toFixed(4)}   gaussian MMD² = ${gau.toFixed(4)} (σ = ${sigma.toFixed(3)})`;
  const c = $("cloud");
  const g = c.getContext("2d");
  const scale = c.width / 12;
  g.clearRect(0, 0, c.width, c.height);
  g.strokeStyle = "#eee";
  g.beginPath();
  g.moveTo(c.width / 2, 0); g.lineTo(c.width / 2, c.height);
  g.moveTo(0, c.height / 2); g.lineTo(c.width, c.height / 2);
  g.stroke();
  for (let i = 0; i < 2 * n; i++) {
    const x = out[5 + 2 * i], y = out[6 + 2 * i];
    g.fillStyle = i < n ? "rgba(31,95,168,.6)" : "rgba(192,57,43,.6)";
    g.fillRect(c.width / 2 + x * scale - 2, c.height / 2 - y * scale - 2, 4, 4);
  }
}

function drawClasses() {
  const box = $("classes");
  box.replaceChildren();
  const size = 16;
  for (let k = 0; k < classCount(); k++) {
    const px = renderClass(k, size, Number($("noise").value), Number($("corr").value), Number($("rseed").value) >>> 0);
    const c = document.createElement("canvas");
    c.width = size;
    c.height = size;
    c.title = `class ${k}`;
    c.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(px), size, size), 0, 0);
    box.appendChild(c);
  }
}

await init();
$("status").textContent = "";
for (const id of ["ipe", "iter"]) $(id).addEventListener("input", drawCurve);
for (const id of ["shift", "spread", "points", "seed"]) $(id).addEventListener("input", drawCloud);
for (const id of ["noise", "corr", "rseed"]) $(id).addEventListener("input", drawClasses);
drawCurve();
drawCloud();
drawClasses();
