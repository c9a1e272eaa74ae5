use std::io::Write;

use crate::encoder::Encoder;
use crate::heads::{head_init, HeadConfig, HeadKind};
use crate::parallel;
use crate::{Error, Result};

use super::{evaluate, head_seed, target_mean, train, Model, Sample, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub head: HeadKind,
    pub depth: usize,
    pub width: usize,
    /// Test RMSE of the best-validation checkpoint.
    pub rmse: f64,
    pub best_epoch: usize,
}

/// Trains a freshly initialized head for every (depth, width) cell and
/// scores its best checkpoint on `test`. Cells are independent and run
/// through `cfg.execution`; rows come back depth-major.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    train_set: &[Sample],
    test: &[Sample],
    encoder: Option<&Encoder>,
    head: &HeadConfig,
    input_width: usize,
    depths: &[usize],
    widths: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    if depths.is_empty() || widths.is_empty() {
        return Err(Error::Empty("sweep grid".into()));
    }
    if depths.contains(&0) {
        return Err(Error::InvalidValue("sweep depths must be positive".into()));
    }
    let cells: Vec<(usize, usize)> = depths
        .iter()
        .flat_map(|&d| widths.iter().map(move |&w| (d, w)))
        .collect();
    parallel::map(cfg.execution, &cells, |&(depth, width)| {
        let head_cfg = head.for_sweep(depth, width);
        let mut fresh = head_init(&head_cfg, input_width, head_seed(cfg.seed))?;
        fresh.set_output_bias(target_mean(train_set));
        let mut model = Model {
            encoder: encoder.cloned(),
            head: fresh,
        };
        let history = train(&mut model, train_set, None, cfg)?;
        let rmse = evaluate(&history.best_model, test, cfg.execution)?.rmse;
        log::info!("{} depth {depth} width {width}: rmse {rmse:.4}", head.kind);
        Ok(SweepRow {
            head: head.kind,
            depth,
            width,
            rmse,
            best_epoch: history.best_epoch,
        })
    })
    .into_iter()
    .collect()
}

/// `head,depth,width,rmse,best_epoch`.
pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "head,depth,width,rmse,best_epoch")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.head, r.depth, r.width, r.rmse, r.best_epoch
        )?;
    }
    Ok(())
}
