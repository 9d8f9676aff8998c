use std::path::Path;

use anyhow::{anyhow, bail, Result};
use plotters::prelude::*;

use genrec_core::data::Split;
use genrec_core::trainer::{read_jsonl, Phase, Record, METRICS_FILE};

use crate::Common;

/// Epoch-mean losses and validation Recall over the run.
#[derive(Debug, Default, PartialEq)]
pub struct Curves {
    pub tokenizer: Vec<(f64, f64)>,
    pub recommender: Vec<(f64, f64)>,
    pub recall: Vec<(f64, f64)>,
}

pub fn curves(records: &[Record]) -> Curves {
    let mut c = Curves::default();
    let mut n = 0.0;
    for r in records {
        match r {
            Record::Epoch { phase, losses, .. } => {
                n += 1.0;
                match phase {
                    Phase::Tokenizer => c.tokenizer.push((n, losses.combined)),
                    _ => c.recommender.push((n, losses.combined)),
                }
            }
            Record::Eval { split: Split::Valid, recall, .. } => {
                if let Some(v) = recall.get(&10).or_else(|| recall.values().last()) {
                    c.recall.push((n, *v));
                }
            }
            _ => {}
        }
    }
    c
}

fn range(points: &[&[(f64, f64)]]) -> (f64, f64, f64, f64) {
    let all = points.iter().flat_map(|p| p.iter());
    let (mut x1, mut y0, mut y1) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    (0.0, x1 + 1.0, y0 - pad, y1 + pad)
}

pub fn plot(_common: &Common, run: &Path, out: &Path) -> Result<()> {
    let records: Vec<Record> = read_jsonl(&run.join(METRICS_FILE))?;
    let c = curves(&records);
    if c.tokenizer.is_empty() && c.recommender.is_empty() {
        bail!("{} holds no epoch records", run.join(METRICS_FILE).display());
    }
    let e = |e: &dyn std::fmt::Display| anyhow!("plotting failed: {e}");
    let root = SVGBackend::new(out, (900, 700)).into_drawing_area();
    root.fill(&WHITE).map_err(|x| e(&x))?;
    let (top, bottom) = root.split_vertically(380);

    let (x0, x1, y0, y1) = range(&[&c.tokenizer, &c.recommender]);
    let mut chart = ChartBuilder::on(&top)
        .caption("epoch loss", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|x| e(&x))?;
    chart.configure_mesh().x_desc("epoch").draw().map_err(|x| e(&x))?;
    chart
        .draw_series(LineSeries::new(c.recommender.clone(), &BLUE))
        .map_err(|x| e(&x))?
        .label("recommender")
        .legend(|(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], BLUE));
    chart
        .draw_series(c.tokenizer.iter().map(|&p| Circle::new(p, 4, RED.filled())))
        .map_err(|x| e(&x))?
        .label("tokenizer")
        .legend(|(x, y)| Circle::new((x + 10, y), 4, RED.filled()));
    chart.configure_series_labels().border_style(BLACK).draw().map_err(|x| e(&x))?;

    let (x0, x1, y0, y1) = range(&[&c.recall]);
    let mut chart = ChartBuilder::on(&bottom)
        .caption("validation Recall@10", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|x| e(&x))?;
    chart.configure_mesh().x_desc("epoch").draw().map_err(|x| e(&x))?;
    chart.draw_series(LineSeries::new(c.recall.clone(), &GREEN)).map_err(|x| e(&x))?;
    chart.draw_series(c.recall.iter().map(|&p| Circle::new(p, 3, GREEN.filled()))).map_err(|x| e(&x))?;
    root.present().map_err(|x| e(&x))?;
    println!("wrote {}", out.display());
    Ok(())
}
