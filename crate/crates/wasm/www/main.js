// Built with: wasm-pack build crates/wasm --target web --out-dir www/pkg
import init, { psi_profile, verify_spec, simulate, bundled_names } from "./pkg/ccm_wasm.js";

const $ = (id) => document.getElementById(id);

function numbers(text) {
  return text.split(",").map((s) => s.trim()).filter((s) => s.length).map(Number);
}

// Polyline plot; `series` is [{xs, ys, color}], y on a log axis when `logY`.
function plot(canvas, series, logY) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 40;
  ctx.clearRect(0, 0, w, h);
  const tf = (y) => (logY ? Math.log10(y) : y);
  let xmin = Infinity, xmax = -Infinity, ymin = Infinity, ymax = -Infinity;
  for (const s of series) {
    s.xs.forEach((x, i) => {
      const y = s.ys[i];
      if (y === null || !isFinite(tf(y))) return;
      xmin = Math.min(xmin, x); xmax = Math.max(xmax, x);
      ymin = Math.min(ymin, tf(y)); ymax = Math.max(ymax, tf(y));
    });
  }
  if (!isFinite(xmin) || xmin === xmax) return;
  if (ymin === ymax) { ymin -= 1; ymax += 1; }
  const px = (x) => pad + ((x - xmin) / (xmax - xmin)) * (w - 2 * pad);
  const py = (y) => h - pad - ((tf(y) - ymin) / (ymax - ymin)) * (h - 2 * pad);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  ctx.fillStyle = "#444";
  ctx.fillText(xmin.toPrecision(3), pad, h - pad + 14);
  ctx.fillText(xmax.toPrecision(3), w - pad - 30, h - pad + 14);
  const ylab = (v) => (logY ? "1e" + v.toFixed(1) : v.toPrecision(3));
  ctx.fillText(ylab(ymax), 2, pad + 4);
  ctx.fillText(ylab(ymin), 2, h - pad);
  for (const s of series) {
    ctx.strokeStyle = s.color;
    ctx.beginPath();
    let pen = false;
    s.xs.forEach((x, i) => {
      const y = s.ys[i];
      if (y === null || !isFinite(tf(y))) { pen = false; return; }
      if (pen) ctx.lineTo(px(x), py(y)); else ctx.moveTo(px(x), py(y));
      pen = true;
    });
    ctx.stroke();
  }
}

function runProfile() {
  try {
    const r = JSON.parse(psi_profile(+$("p-lo").value, +$("p-hi").value, +$("p-n").value, +$("p-ex").value));
    const xs = r.samples.map((s) => s.x);
    plot($("p-canvas"), [
      { xs, ys: r.samples.map((s) => s.psi), color: "#06c" },
      { xs, ys: xs.map((x) => (x === 0 ? null : 4 / Math.abs(x) ** 3)), color: "#e80" },
    ], true);
    const g = r.growth ? `\npsi ~ s^${r.growth.exponent.toFixed(4)} (r^2 ${r.growth.r_squared.toFixed(6)})` : "";
    $("p-out").textContent =
      `max psi ${r.max_psi}\npoints without a certificate: ${r.invalid_points}\nblow-up: ${r.blow_up}${g}`;
  } catch (e) {
    $("p-out").textContent = "error: " + e;
  }
}

function runVerify() {
  const lambda = $("v-lambda").value === "" ? NaN : +$("v-lambda").value;
  try {
    const r = JSON.parse(verify_spec("builtin:" + $("v-spec").value, lambda));
    const word = (b) => (b ? "pass" : "FAIL");
    $("v-out").innerHTML = "";
    const lines = [
      `grid points: ${r.domain.points}`,
      `metric bounds: ${r.metric_bounds ? word(r.metric_bounds.pass) : "n/a"}`,
      `contraction on ker(B'M): ${word(r.ccm.pass)} (worst margin ${r.ccm.worst_margin})`,
      `orthogonality: ${word(r.orthogonality.pass)}`,
      `integrability: ${word(r.integrability.pass)} (max psi ${r.integrability.max_psi})`,
      `verdict: ${word(r.verdict)} on the sampled domain`,
    ];
    $("v-out").textContent = lines.join("\n");
    $("v-out").className = r.verdict ? "pass" : "fail";
  } catch (e) {
    $("v-out").textContent = "error: " + e;
    $("v-out").className = "fail";
  }
}

function runSimulate() {
  try {
    const r = JSON.parse(simulate(
      "builtin:" + $("s-spec").value,
      new Float64Array(numbers($("s-x0").value)),
      new Float64Array(numbers($("s-xs").value)),
      new Float64Array(numbers($("s-us").value)),
      +$("s-T").value, 1e-3,
    ));
    if (r.failure) {
      plot($("s-canvas"), [], false);
      $("s-out").textContent = `stopped at t = ${r.failure_t}: ${r.failure}`;
      return;
    }
    const err = r.x.map((x, i) => Math.hypot(...x.map((v, j) => v - r.x_star[i][j])));
    plot($("s-canvas"), [{ xs: r.t, ys: r.v.map((v) => (v > 0 ? v : null)), color: "#06c" }], true);
    const c = r.report;
    $("s-out").textContent =
      `V(t) on a log axis\nfitted rate ${c.fitted_rate} (lambda ${c.lambda})\n` +
      `overshoot ${c.observed_overshoot} (claimed ${c.claimed_overshoot})\n` +
      `final |x - x*| ${err[err.length - 1].toExponential(3)}\nconvergence: ${c.pass ? "pass" : "FAIL"}`;
  } catch (e) {
    $("s-out").textContent = "error: " + e;
  }
}

await init();
for (const id of ["v-spec", "s-spec"]) {
  for (const name of JSON.parse(bundled_names())) {
    $(id).add(new Option(name, name, false, name === "double-integrator"));
  }
}
$("p-run").onclick = runProfile;
$("v-run").onclick = runVerify;
$("s-run").onclick = runSimulate;
runProfile();
