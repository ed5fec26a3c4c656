import init, { maskRaster, gruTrace, sceneCameras, sceneBev } from "./pkg/geobev_web.js";

const $ = (id) => document.getElementById(id);

function show(fn) {
  try {
    $("err").textContent = "";
    fn();
  } catch (e) {
    $("err").textContent = String(e.message ?? e);
  }
}

function paint(canvas, raster, scale) {
  canvas.width = raster.width;
  canvas.height = raster.height;
  canvas.style.width = `${raster.width * scale}px`;
  canvas.style.height = `${raster.height * scale}px`;
  const img = new ImageData(new Uint8ClampedArray(raster.rgba), raster.width, raster.height);
  canvas.getContext("2d").putImageData(img, 0, 0);
}

function drawMask() {
  const cams = +$("m-cams").value;
  const fov = +$("m-fov").value;
  const range = +$("m-range").value;
  const eps = $("m-eps").value / 100;
  $("m-cams-v").textContent = cams;
  $("m-fov-v").textContent = `${fov}°`;
  $("m-range-v").textContent = `${range} m`;
  $("m-eps-v").textContent = eps.toFixed(2);
  show(() => {
    const r = maskRaster(cams, fov, range, eps);
    paint($("m-canvas"), r, 4);
    $("m-info").textContent = `${r.valid} of ${r.width * r.height} cells valid (0.5 m cells, forward is up)`;
    r.free();
  });
}

const numbers = (s) => s.trim().split(/[\s,]+/).filter(Boolean).map(Number);

function drawGru() {
  show(() => {
    const xs = numbers($("g-x").value);
    const out = gruTrace(new Float64Array(numbers($("g-w").value)), new Float64Array(xs));
    const c = $("g-canvas");
    const ctx = c.getContext("2d");
    ctx.fillStyle = "#1b1e23";
    ctx.fillRect(0, 0, c.width, c.height);
    const y = (v) => c.height / 2 - v * (c.height / 2 - 10);
    ctx.strokeStyle = "#444";
    ctx.beginPath();
    ctx.moveTo(0, y(0));
    ctx.lineTo(c.width, y(0));
    ctx.stroke();
    const step = c.width / Math.max(xs.length, 1);
    ["#fc6", "#6cf", "#c8f"].forEach((color, k) => {
      ctx.strokeStyle = color;
      ctx.beginPath();
      for (let t = 0; t < xs.length; t++) {
        const px = (t + 0.5) * step;
        t === 0 ? ctx.moveTo(px, y(out[3 * t + k])) : ctx.lineTo(px, y(out[3 * t + k]));
      }
      ctx.stroke();
    });
  });
}

function drawScene() {
  const seed = Math.max(0, Math.floor(+$("s-seed").value || 0));
  const frame = +$("s-frame").value;
  $("s-frame-v").textContent = frame;
  show(() => {
    const cams = sceneCameras(seed, frame);
    paint($("s-cams"), cams, 2);
    const bev = sceneBev(seed, frame);
    paint($("s-bev"), bev, 3);
    $("s-info").textContent = `${cams.valid} vehicles, ${bev.valid} vehicle cells; lighter ground is visible to some camera`;
    cams.free();
    bev.free();
  });
}

await init();
for (const id of ["m-cams", "m-fov", "m-range", "m-eps"]) $(id).addEventListener("input", drawMask);
for (const id of ["g-w", "g-x"]) $(id).addEventListener("input", drawGru);
for (const id of ["s-seed", "s-frame"]) $(id).addEventListener("input", drawScene);
drawMask();
drawGru();
drawScene();
