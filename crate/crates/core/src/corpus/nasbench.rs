//! Ingestion of cell-based benchmark records.
//!
//! Each input line is `{"adjacency": [row-major 0/1], "ops": [...],
//! "val_accuracy": f}` describing a cell DAG of at most 7 vertices and 9
//! edges whose first vertex is `input` and last is `output`. Interior
//! vertices are visited in topological order (Kahn's algorithm, lowest
//! vertex index first) and emitted as a flat layer sequence, then stacked
//! into the fixed macro skeleton: a 128-channel conv-norm-activation stem,
//! three stacks of three cells at 128, 256 and 512 channels, and a 2x2 max
//! pool between stacks.

use std::io::BufRead;
use std::path::Path;

use serde::Deserialize;

use super::{CorpusRecord, Source};
use crate::arch::{Architecture, Block, BlockKind, LayerDescriptor, PoolType, Shape, Window};
use crate::error::{Error, Result};
use crate::library::instantiate;

pub const MAX_VERTICES: usize = 7;
pub const MAX_EDGES: usize = 9;
pub const STACK_CHANNELS: [u32; 3] = [128, 256, 512];
pub const CELLS_PER_STACK: usize = 3;

#[derive(Debug, Clone, Deserialize)]
struct RawRecord {
    adjacency: Vec<u8>,
    ops: Vec<String>,
    val_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CellOp {
    Conv3,
    Conv1,
    MaxPool3,
}

fn parse_op(s: &str) -> Option<CellOp> {
    match s {
        "conv3x3-bn-relu" => Some(CellOp::Conv3),
        "conv1x1-bn-relu" => Some(CellOp::Conv1),
        "maxpool3x3" => Some(CellOp::MaxPool3),
        _ => None,
    }
}

/// Validates one record and returns its interior ops in topological order.
fn cell_ops(raw: &RawRecord, line: usize) -> Result<Vec<CellOp>> {
    let perr = |m: String| Error::Parse { line, message: m };
    let n = raw.ops.len();
    if !(2..=MAX_VERTICES).contains(&n) {
        return Err(perr(format!("cell has {n} vertices, expected 2..={MAX_VERTICES}")));
    }
    if raw.adjacency.len() != n * n {
        return Err(perr(format!(
            "adjacency has {} entries, expected {}",
            raw.adjacency.len(),
            n * n
        )));
    }
    if raw.adjacency.iter().any(|a| *a > 1) {
        return Err(perr("adjacency entries must be 0 or 1".into()));
    }
    let edges = raw.adjacency.iter().filter(|a| **a == 1).count();
    if edges > MAX_EDGES {
        return Err(perr(format!("cell has {edges} edges, at most {MAX_EDGES} allowed")));
    }
    if raw.ops[0] != "input" || raw.ops[n - 1] != "output" {
        return Err(perr("first op must be input and last op output".into()));
    }
    if !(0.0..=1.0).contains(&raw.val_accuracy) {
        return Err(perr(format!("accuracy {} outside [0, 1]", raw.val_accuracy)));
    }
    let mut interior = vec![None; n];
    for (v, op) in raw.ops.iter().enumerate().take(n - 1).skip(1) {
        interior[v] = Some(parse_op(op).ok_or_else(|| perr(format!("unknown op {op:?}")))?);
    }

    let mut indeg = vec![0usize; n];
    for i in 0..n {
        for j in 0..n {
            indeg[j] += raw.adjacency[i * n + j] as usize;
        }
    }
    let mut order = Vec::with_capacity(n);
    let mut done = vec![false; n];
    while order.len() < n {
        let Some(v) = (0..n).find(|&v| !done[v] && indeg[v] == 0) else {
            return Err(Error::Graph {
                line,
                message: "cell graph contains a cycle".into(),
            });
        };
        done[v] = true;
        order.push(v);
        for j in 0..n {
            if raw.adjacency[v * n + j] == 1 {
                indeg[j] -= 1;
            }
        }
    }
    Ok(order.into_iter().filter_map(|v| interior[v]).collect())
}

fn cell_block(ops: &[CellOp], input: Shape, channels: u32) -> Result<Block> {
    let mut layers: Vec<LayerDescriptor> = Vec::new();
    let mut cur = input;
    let needs_projection =
        ops.is_empty() || (ops[0] == CellOp::MaxPool3 && input.channels != channels);
    if needs_projection {
        let l = LayerDescriptor::conv(0, cur, channels, Window::square(1, 1, 0), 1)?;
        cur = l.out_size;
        layers.push(l);
    }
    for op in ops {
        let id = layers.len();
        let l = match op {
            CellOp::Conv3 => LayerDescriptor::conv(id, cur, channels, Window::square(3, 1, 1), 1)?,
            CellOp::Conv1 => LayerDescriptor::conv(id, cur, channels, Window::square(1, 1, 0), 1)?,
            CellOp::MaxPool3 => {
                let k = 3.min(cur.height).min(cur.width);
                LayerDescriptor::pool(id, cur, PoolType::Max, Window::square(k, 1, 0))?
            }
        };
        cur = l.out_size;
        layers.push(l);
    }
    Ok(Block {
        kind: BlockKind::Cell,
        width: cur.channels,
        layers,
    })
}

fn downsample_block(input: Shape) -> Result<Block> {
    let w = if input.height >= 2 && input.width >= 2 {
        Window::square(2, 2, 0)
    } else {
        Window::square(1, 1, 0)
    };
    let l = LayerDescriptor::pool(0, input, PoolType::Max, w)?;
    Ok(Block {
        kind: BlockKind::Maxpool,
        width: input.channels,
        layers: vec![l],
    })
}

/// Stacks a cell into the macro skeleton.
fn skeleton(ops: &[CellOp], input: Shape, num_classes: u32) -> Result<Architecture> {
    let stem = instantiate(BlockKind::ConvNormActivation, input, STACK_CHANNELS[0])?;
    let mut cur = stem.out_size();
    let mut blocks = vec![stem];
    for (s, &c) in STACK_CHANNELS.iter().enumerate() {
        if s > 0 {
            let d = downsample_block(cur)?;
            cur = d.out_size();
            blocks.push(d);
        }
        for _ in 0..CELLS_PER_STACK {
            let b = cell_block(ops, cur, c)?;
            cur = b.out_size();
            blocks.push(b);
        }
    }
    Ok(Architecture::new(blocks, input, num_classes)?)
}

/// Parses benchmark lines, keeping records with accuracy ≥ `min_accuracy`.
/// Every line is validated, including dropped ones.
pub fn parse_nasbench(
    reader: impl BufRead,
    min_accuracy: f64,
    input: Shape,
    num_classes: u32,
) -> Result<Vec<CorpusRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let ops = cell_ops(&raw, line_no)?;
        if raw.val_accuracy < min_accuracy {
            continue;
        }
        let arch = skeleton(&ops, input, num_classes).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(CorpusRecord {
            id: out.len(),
            source: Source::Nasbench,
            fitness: Some(raw.val_accuracy),
            arch,
        });
    }
    Ok(out)
}

pub fn load_nasbench(
    path: &Path,
    min_accuracy: f64,
    input: Shape,
    num_classes: u32,
) -> Result<Vec<CorpusRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_nasbench(std::io::BufReader::new(f), min_accuracy, input, num_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<Vec<CorpusRecord>> {
        parse_nasbench(s.as_bytes(), 0.9, Shape::new(3, 32, 32), 10)
    }

    #[test]
    fn linear_cell_flattens_to_one_layer() {
        let recs = parse(
            r#"{"adjacency":[0,1,0,0,0,1,0,0,0],"ops":["input","conv3x3-bn-relu","output"],"val_accuracy":0.93}"#,
        )
        .unwrap();
        assert_eq!(recs.len(), 1);
        let a = &recs[0].arch;
        assert_eq!(a.depth(), 12);
        assert_eq!(a.blocks[1].layers.len(), 1);
        assert_eq!(a.blocks[1].kind, BlockKind::Cell);
        assert_eq!(a.kinds()[0], BlockKind::ConvNormActivation);
        assert_eq!(a.kinds()[4], BlockKind::Maxpool);
        assert_eq!(a.output_shape(), Shape::new(512, 8, 8));
    }

    #[test]
    fn topological_order_breaks_ties_by_index() {
        // input -> {1: maxpool, 2: conv1x1} -> 3: conv3x3 -> output; 1 and 2 are both ready
        let adj = [
            0, 1, 1, 0, 0, //
            0, 0, 0, 1, 0, //
            0, 0, 0, 1, 0, //
            0, 0, 0, 0, 1, //
            0, 0, 0, 0, 0,
        ];
        let raw = RawRecord {
            adjacency: adj.to_vec(),
            ops: ["input", "maxpool3x3", "conv1x1-bn-relu", "conv3x3-bn-relu", "output"]
                .map(String::from)
                .to_vec(),
            val_accuracy: 0.95,
        };
        assert_eq!(
            cell_ops(&raw, 1).unwrap(),
            vec![CellOp::MaxPool3, CellOp::Conv1, CellOp::Conv3]
        );
    }

    #[test]
    fn malformed_and_cyclic_records_are_reported() {
        let cyc = r#"{"adjacency":[0,1,0,0,0,1,0,1,0],"ops":["input","conv3x3-bn-relu","output"],"val_accuracy":0.95}"#;
        assert!(matches!(parse(cyc), Err(Error::Graph { line: 1, .. })));
        let short = format!("{}\n{}", cyc.replace(",0,1,0]", ",0,0,0]"), r#"{"ops":[]}"#);
        assert!(matches!(parse(&short), Err(Error::Parse { line: 2, .. })));
        let low = r#"{"adjacency":[0,1,0,0,0,1,0,0,0],"ops":["input","conv1x1-bn-relu","output"],"val_accuracy":0.89}"#;
        assert!(parse(low).unwrap().is_empty());
    }

    #[test]
    fn empty_cell_gets_a_projection() {
        let recs = parse(r#"{"adjacency":[0,1,0,0],"ops":["input","output"],"val_accuracy":0.91}"#)
            .unwrap();
        assert!(recs[0].arch.blocks[1..4].iter().all(|b| b.layers.len() == 1));
    }
}
