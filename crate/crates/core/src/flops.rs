//! Analytic multiply-accumulate counts for one attention block and one selective
//! SSM block. One MAC counts as one FLOP. Term names match the scope labels the
//! encoders record on the tape, so the two can be compared directly.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Attention,
    Ssm,
}

impl BlockKind {
    pub fn name(self) -> &'static str {
        match self {
            BlockKind::Attention => "attention",
            BlockKind::Ssm => "ssm",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostQuery {
    pub kind: BlockKind,
    pub batch: u64,
    pub len: u64,
    pub width: u64,
    pub heads: u64,
    pub expand: u64,
    pub state: u64,
    pub d_conv: u64,
    /// Defaults to `⌈width / 16⌉`.
    pub dt_rank: Option<u64>,
}

impl CostQuery {
    pub fn attention(batch: u64, len: u64, width: u64) -> Self {
        Self {
            kind: BlockKind::Attention,
            batch,
            len,
            width,
            heads: 8,
            expand: 2,
            state: 16,
            d_conv: 4,
            dt_rank: None,
        }
    }

    pub fn ssm(batch: u64, len: u64, width: u64) -> Self {
        Self {
            kind: BlockKind::Ssm,
            ..Self::attention(batch, len, width)
        }
    }

    pub fn rank(&self) -> u64 {
        self.dt_rank.unwrap_or(self.width.div_ceil(16))
    }

    fn validate(&self, kind: BlockKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Contract(format!("{} query passed to the {} model", self.kind.name(), kind.name())));
        }
        let dims = [self.batch, self.len, self.width, self.heads, self.expand, self.state, self.d_conv, self.rank()];
        if dims.contains(&0) {
            return Err(Error::Contract("cost query fields must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub query: CostQuery,
    pub total: u64,
    pub terms: Vec<(String, u64)>,
}

impl CostReport {
    fn new(query: CostQuery, per_sequence: Vec<(&str, u64)>) -> Self {
        let terms: Vec<(String, u64)> = per_sequence
            .into_iter()
            .map(|(n, v)| (n.to_string(), query.batch * v))
            .collect();
        let total = terms.iter().map(|(_, v)| v).sum();
        Self { query, total, terms }
    }

    pub fn term(&self, name: &str) -> Option<u64> {
        self.terms.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

/// `B·(4·L·D² + 2·L²·D)`: Q/K/V and output projections, scores and weighted values.
pub fn attn_flops(q: &CostQuery) -> Result<CostReport> {
    q.validate(BlockKind::Attention)?;
    let (l, d) = (q.len, q.width);
    Ok(CostReport::new(
        *q,
        vec![
            ("attn.qkv", 3 * l * d * d),
            ("attn.scores", l * l * d),
            ("attn.context", l * l * d),
            ("attn.out", l * d * d),
        ],
    ))
}

/// `B·L·(2·D·eD + eD·k + eD·(r + 2S) + r·eD + 3·eD·S + eD·D)`.
pub fn ssm_flops(q: &CostQuery) -> Result<CostReport> {
    q.validate(BlockKind::Ssm)?;
    let (l, d, s, r) = (q.len, q.width, q.state, q.rank());
    let inner = q.expand * d;
    Ok(CostReport::new(
        *q,
        vec![
            ("ssm.in_proj", l * 2 * d * inner),
            ("ssm.conv", l * inner * q.d_conv),
            ("ssm.x_proj", l * inner * (r + 2 * s)),
            ("ssm.dt_proj", l * r * inner),
            ("ssm.scan", l * 3 * inner * s),
            ("ssm.out_proj", l * inner * d),
        ],
    ))
}

pub fn flops(q: &CostQuery) -> Result<CostReport> {
    match q.kind {
        BlockKind::Attention => attn_flops(q),
        BlockKind::Ssm => ssm_flops(q),
    }
}

/// Cartesian sweep over batch, length and width; one attention and one SSM row
/// per point, other hyperparameters taken from `base`.
pub fn sweep_report(batches: &[u64], lens: &[u64], widths: &[u64], base: &CostQuery) -> Result<Vec<CostReport>> {
    if batches.is_empty() || lens.is_empty() || widths.is_empty() {
        return Err(Error::Config("sweep ranges must be non-empty".into()));
    }
    let mut out = Vec::with_capacity(batches.len() * lens.len() * widths.len() * 2);
    for &batch in batches {
        for &len in lens {
            for &width in widths {
                for kind in [BlockKind::Attention, BlockKind::Ssm] {
                    let q = CostQuery {
                        kind,
                        batch,
                        len,
                        width,
                        ..*base
                    };
                    out.push(flops(&q)?);
                }
            }
        }
    }
    Ok(out)
}

/// Rows `kind,B,L,D,total` followed by one `name=value` cell per term.
pub fn write_csv(reports: &[CostReport], w: impl Write) -> Result<()> {
    let mut writer = csv::WriterBuilder::new().flexible(true).from_writer(w);
    writer.write_record(["kind", "B", "L", "D", "total", "terms"])?;
    for r in reports {
        let q = &r.query;
        let mut row = vec![
            q.kind.name().to_string(),
            q.batch.to_string(),
            q.len.to_string(),
            q.width.to_string(),
            r.total.to_string(),
        ];
        row.extend(r.terms.iter().map(|(n, v)| format!("{n}={v}")));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}
