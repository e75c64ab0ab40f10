import init, {
  attentionSlice, psmSample, psmEdges, quantizationCurve, quantizationPitches,
} from "./pkg/ctxpose_demo.js";

const SIDE = 24;
const $ = (id) => document.getElementById(id);

function attentionView() {
  const canvas = $("att");
  const ctx = canvas.getContext("2d");
  const cell = canvas.width / SIDE;
  // voxel index is (ix * SIDE + iy) on a one-voxel-thick slice
  let query = 6 * SIDE + 12;
  let peak = 15 * SIDE + 12;

  function draw() {
    const alpha = 10 ** Number($("alpha").value);
    const sharp = Number($("sharp").value);
    $("alpha-out").textContent = alpha.toFixed(alpha < 10 ? 2 : 0);
    $("sharp-out").textContent = sharp.toFixed(1);
    let w;
    try {
      w = attentionSlice(SIDE, alpha, query, peak, sharp, $("raw").checked);
    } catch (e) {
      ctx.fillStyle = "#fff";
      ctx.fillRect(0, 0, canvas.width, canvas.height);
      ctx.fillStyle = "#a00";
      ctx.fillText(String(e), 10, 20);
      return;
    }
    const max = Math.max(...w) || 1;
    for (let ix = 0; ix < SIDE; ix++) {
      for (let iy = 0; iy < SIDE; iy++) {
        const t = w[ix * SIDE + iy] / max;
        const c = Math.round(255 * (1 - t));
        ctx.fillStyle = `rgb(${c},${c},255)`;
        ctx.fillRect(ix * cell, (SIDE - 1 - iy) * cell, cell, cell);
      }
    }
    const mark = (k, style) => {
      const x = (Math.floor(k / SIDE) + 0.5) * cell;
      const y = (SIDE - 1 - (k % SIDE) + 0.5) * cell;
      ctx.strokeStyle = style;
      ctx.lineWidth = 2;
      ctx.beginPath();
      if (style === "red") {
        ctx.moveTo(x - 6, y - 6); ctx.lineTo(x + 6, y + 6);
        ctx.moveTo(x + 6, y - 6); ctx.lineTo(x - 6, y + 6);
      } else {
        ctx.arc(x, y, 6, 0, 2 * Math.PI);
      }
      ctx.stroke();
    };
    mark(query, "black");
    mark(peak, "red");
  }

  canvas.addEventListener("click", (ev) => {
    const r = canvas.getBoundingClientRect();
    const ix = Math.floor((ev.clientX - r.left) / cell);
    const iy = SIDE - 1 - Math.floor((ev.clientY - r.top) / cell);
    const k = ix * SIDE + iy;
    if (ev.shiftKey) peak = k; else query = k;
    draw();
  });
  for (const id of ["alpha", "sharp", "raw"]) $(id).addEventListener("input", draw);
  draw();
}

function psmView() {
  const canvas = $("psm");
  const ctx = canvas.getContext("2d");
  const edges = psmEdges();
  const half = 160; // grid half-extent in mm
  const sx = (x) => canvas.width / 2 + (x / half) * (canvas.width / 2 - 10);
  const sz = (z) => canvas.height / 2 - (z / half) * (canvas.height / 2 - 10);
  let seed = 0;

  function draw() {
    const occ = Number($("occ").value);
    $("occ-out").textContent = occ.toFixed(2);
    const out = psmSample(seed, occ);
    const n = (out.length / 10) | 0;
    const pose = (i) => Array.from({ length: n }, (_, j) => out.slice(3 * (i * n + j), 3 * (i * n + j) + 3));
    const [gt, map, arg] = [pose(0), pose(1), pose(2)];
    const occluded = Array.from(out.slice(9 * n));

    ctx.clearRect(0, 0, canvas.width, canvas.height);
    ctx.strokeStyle = "#eee";
    for (let i = 0; i <= 8; i++) {
      const p = (i / 8) * (canvas.width - 20) + 10;
      ctx.beginPath(); ctx.moveTo(p, 10); ctx.lineTo(p, canvas.height - 10); ctx.stroke();
      ctx.beginPath(); ctx.moveTo(10, p); ctx.lineTo(canvas.width - 10, p); ctx.stroke();
    }
    const skeleton = (p, color, width) => {
      ctx.strokeStyle = color;
      ctx.lineWidth = width;
      for (let e = 0; e < edges.length; e += 2) {
        const [a, b] = [p[edges[e]], p[edges[e + 1]]];
        ctx.beginPath(); ctx.moveTo(sx(a[0]), sz(a[2])); ctx.lineTo(sx(b[0]), sz(b[2])); ctx.stroke();
      }
      p.forEach((j, u) => {
        ctx.beginPath();
        ctx.arc(sx(j[0]), sz(j[2]), 5, 0, 2 * Math.PI);
        if (occluded[u]) { ctx.fillStyle = "#fff"; ctx.fill(); ctx.stroke(); } else { ctx.fillStyle = color; ctx.fill(); }
      });
    };
    skeleton(gt, "#bbb", 8);
    skeleton(arg, "#e08000", 2);
    skeleton(map, "#1060d0", 3);

    const err = (p) => p.reduce((s, j, u) => s + Math.hypot(j[0] - gt[u][0], j[1] - gt[u][1], j[2] - gt[u][2]), 0) / n;
    $("psm-err").textContent = `seed ${seed}: MPJPE tree MAP ${err(map).toFixed(1)} mm, argmax ${err(arg).toFixed(1)} mm`;
  }

  $("resample").addEventListener("click", () => { seed += 1; draw(); });
  $("occ").addEventListener("input", draw);
  draw();
}

function quantView() {
  const canvas = $("quant");
  const ctx = canvas.getContext("2d");
  const pitches = quantizationPitches();

  function draw() {
    const sigma = Number($("sigma").value);
    $("sigma-out").textContent = sigma;
    const errs = quantizationCurve(sigma, 12);
    const [w, h, pad] = [canvas.width, canvas.height, 50];
    ctx.clearRect(0, 0, w, h);
    // log-log axes
    const lx = (p) => pad + ((Math.log10(pitches[0]) - Math.log10(p)) / (Math.log10(pitches[0]) - Math.log10(pitches.at(-1)))) * (w - 2 * pad);
    const floor = 1e-6;
    const top = Math.max(...errs, 1);
    const ly = (e) => h - pad - ((Math.log10(Math.max(e, floor)) - Math.log10(floor)) / (Math.log10(top) - Math.log10(floor))) * (h - 2 * pad);
    ctx.strokeStyle = "#999";
    ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
    ctx.fillStyle = "#333";
    pitches.forEach((p) => ctx.fillText(`${p} mm`, lx(p) - 12, h - pad + 16));
    for (let d = Math.ceil(Math.log10(floor)); d <= Math.log10(top); d += 1) {
      ctx.fillText(`1e${d}`, 8, ly(10 ** d) + 4);
    }
    ctx.strokeStyle = "#1060d0";
    ctx.lineWidth = 2;
    ctx.beginPath();
    pitches.forEach((p, i) => (i ? ctx.lineTo : ctx.moveTo).call(ctx, lx(p), ly(errs[i])));
    ctx.stroke();
    pitches.forEach((p, i) => {
      ctx.beginPath(); ctx.arc(lx(p), ly(errs[i]), 3, 0, 2 * Math.PI); ctx.fill();
      ctx.fillText(errs[i].toExponential(1), lx(p) + 5, ly(errs[i]) - 6);
    });
  }

  $("sigma").addEventListener("input", draw);
  draw();
}

await init();
attentionView();
psmView();
quantView();
