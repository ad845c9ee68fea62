import init, { support, solve, choice_curve } from "./pkg/web_demo.js";

const $ = (id) => document.getElementById(id);
const num = (id) => parseFloat($(id).value);

function problem() {
  return [
    new Float64Array([num("ua1"), num("ua2"), num("ub1"), num("ub2")]),
    new Float64Array([num("ea"), num("eb")]),
    num("prior"),
    $("cost").value,
    num("kappa"),
  ];
}

function guard(f) {
  try {
    $("error").textContent = "";
    f();
  } catch (e) {
    $("error").textContent = String(e.message ?? e);
  }
}

function drawSupport() {
  guard(() => {
    const slope = num("slope");
    $("slope-value").textContent = slope;
    const s = support(...problem(), slope);
    const at = Array.from(s.tangency, (g) => g.toFixed(4)).join(", ");
    $("support-out").textContent = `delta* = ${s.value.toFixed(6)}, tangent at P(w1) = ${at}`;
    $("figure").innerHTML = s.svg;
  });
}

function drawSolution() {
  guard(() => {
    const s = solve(...problem());
    const rows = Array.from(s.posteriors, (g, k) => {
      const a = "abcdef"[s.choices[k]] ?? "-";
      return `P(w1) = ${g.toFixed(4)}  weight ${s.weights[k].toFixed(4)}  choose ${a}`;
    });
    $("solve-out").textContent = `value ${s.value.toFixed(6)}\n` + rows.join("\n");
    $("figure").innerHTML = s.svg;
  });
}

function drawCurve() {
  guard(() => {
    const n = 21;
    const rows = choice_curve(num("gumbel"), num("logsd"), n, Math.max(1, Math.round(num("draws"))));
    const w = 480, h = 240, pad = 32;
    const px = (x) => pad + x * (w - 2 * pad);
    const py = (p) => h - pad - p * (h - 2 * pad);
    const series = [[1, "#1f5fbf", "P(a|w1)"], [2, "#c0392b", "P(a|w2)"], [3, "#555", "P(a)"]];
    let svg = `<svg xmlns="http://www.w3.org/2000/svg" width="${w}" height="${h}" font-family="sans-serif" font-size="11">`;
    svg += `<line x1="${pad}" y1="${py(0)}" x2="${w - pad}" y2="${py(0)}" stroke="black"/>`;
    svg += `<line x1="${pad}" y1="${py(0)}" x2="${pad}" y2="${py(1)}" stroke="black"/>`;
    svg += `<text x="${w / 2}" y="${h - 6}">x_a</text><text x="4" y="${py(1) + 4}">1</text><text x="4" y="${py(0)}">0</text>`;
    series.forEach(([c, color, label], i) => {
      const pts = [];
      for (let k = 0; k < n; k++) pts.push(`${px(rows[4 * k])},${py(rows[4 * k + c])}`);
      svg += `<polyline points="${pts.join(" ")}" fill="none" stroke="${color}" stroke-width="2"/>`;
      svg += `<text x="${w - pad - 60}" y="${pad + 14 * i}" fill="${color}">${label}</text>`;
    });
    $("curve-out").innerHTML = svg + "</svg>";
  });
}

await init();
for (const id of ["ua1", "ua2", "ub1", "ub2", "ea", "eb", "prior", "cost", "kappa", "slope"]) {
  $(id).addEventListener("input", drawSupport);
}
$("solve").addEventListener("click", drawSolution);
$("curve").addEventListener("click", drawCurve);
drawSupport();
