//! Standalone SVG chart for the memory estimates: log2 sides on x, log10
//! bytes on y, one polyline per architecture.

use voxgan::memory::{ArchId, MemoryReport};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 80.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 60.0;

fn color(arch: ArchId) -> &'static str {
    match arch {
        ArchId::Dcgan3d => "#d62728",
        ArchId::Pix2pix3d => "#ff7f0e",
        ArchId::Pggan3d => "#9467bd",
        ArchId::Lr64 => "#1f77b4",
        ArchId::Hr32 => "#2ca02c",
    }
}

pub fn memory_chart(rows: &[MemoryReport]) -> String {
    let xs: Vec<f64> = rows.iter().map(|r| (r.side as f64).log2()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| (r.total as f64).log10()).collect();
    let (x0, x1) = (
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let (y0, y1) = (
        ys.iter().cloned().fold(f64::INFINITY, f64::min).floor(),
        ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max).ceil(),
    );
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let px = |x: f64| MARGIN_L + (x - x0) / (x1 - x0).max(1e-9) * plot_w;
    let py = |y: f64| MARGIN_T + (y1 - y) / (y1 - y0).max(1e-9) * plot_h;

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">Training memory vs image side (log-log)</text>\n",
        MARGIN_L + plot_w / 2.0
    ));

    // Horizontal grid: one line per decade of bytes.
    let mut dec = y0 as i64;
    while dec <= y1 as i64 {
        let y = py(dec as f64);
        s.push_str(&format!(
            "<line x1=\"{MARGIN_L}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>\n",
            MARGIN_L + plot_w
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">1e{dec} B</text>\n",
            MARGIN_L - 6.0,
            y + 4.0
        ));
        dec += 1;
    }
    // Vertical grid: one line per present side.
    let mut sides: Vec<usize> = rows.iter().map(|r| r.side).collect();
    sides.sort_unstable();
    sides.dedup();
    for &side in &sides {
        let x = px((side as f64).log2());
        s.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{MARGIN_T}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#eeeeee\"/>\n",
            MARGIN_T + plot_h
        ));
        s.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">{side}</text>\n",
            MARGIN_T + plot_h + 18.0
        ));
    }
    s.push_str(&format!(
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"middle\">image side (voxels)</text>\n",
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 16.0
    ));

    let mut legend_y = MARGIN_T + 10.0;
    for arch in ArchId::ALL {
        let mut pts: Vec<(usize, u64)> = rows
            .iter()
            .filter(|r| r.arch == arch)
            .map(|r| (r.side, r.total))
            .collect();
        if pts.is_empty() {
            continue;
        }
        pts.sort_unstable();
        let path: Vec<String> = pts
            .iter()
            .map(|&(side, total)| {
                format!("{:.1},{:.1}", px((side as f64).log2()), py((total as f64).log10()))
            })
            .collect();
        let c = color(arch);
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        for p in &path {
            let (x, y) = p.split_once(',').unwrap();
            s.push_str(&format!("<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"{c}\"/>\n"));
        }
        let lx = MARGIN_L + plot_w + 12.0;
        s.push_str(&format!(
            "<line x1=\"{lx}\" y1=\"{legend_y:.1}\" x2=\"{:.1}\" y2=\"{legend_y:.1}\" stroke=\"{c}\" stroke-width=\"2\"/>\n",
            lx + 22.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\">{arch}</text>\n",
            lx + 28.0,
            legend_y + 4.0
        ));
        legend_y += 18.0;
    }
    s.push_str("</svg>\n");
    s
}
