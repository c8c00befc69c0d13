use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::{Dataset, Label, LabelMatrix, MoleculeGraph};
use crate::error::{Error, Result};

/// Reads a JSON-lines graph file and a CSV label file.
///
/// Label rows define the row order. Molecules present in the graph file but
/// absent from the label file are appended with all-unknown labels.
pub fn load_dataset(graph_file: &Path, label_file: &Path) -> Result<Dataset> {
    let graphs = parse_graphs(&fs::read_to_string(graph_file)?)?;
    let (property_ids, rows) = parse_labels(&fs::read_to_string(label_file)?)?;

    let mut by_id: HashMap<&str, usize> = HashMap::new();
    for (i, g) in graphs.iter().enumerate() {
        if by_id.insert(g.id.as_str(), i).is_some() {
            return Err(Error::Ingestion(format!("duplicate molecule id `{}`", g.id)));
        }
    }

    let mut used = vec![false; graphs.len()];
    let mut molecules = Vec::with_capacity(graphs.len());
    let mut ids = Vec::with_capacity(graphs.len());
    let mut entries = Vec::with_capacity(graphs.len() * property_ids.len());
    for (id, labels) in rows {
        let &gi = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::Ingestion(format!("label row references unknown molecule `{id}`")))?;
        if used[gi] {
            return Err(Error::Ingestion(format!("duplicate label row for `{id}`")));
        }
        used[gi] = true;
        molecules.push(graphs[gi].clone());
        ids.push(id);
        entries.extend(labels);
    }
    for (gi, g) in graphs.iter().enumerate() {
        if !used[gi] {
            molecules.push(g.clone());
            ids.push(g.id.clone());
            entries.extend(std::iter::repeat(Label::Unknown).take(property_ids.len()));
        }
    }
    Dataset::new(molecules, LabelMatrix::new(ids, property_ids, entries)?)
}

fn parse_graphs(text: &str) -> Result<Vec<MoleculeGraph>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let g: MoleculeGraph = serde_json::from_str(line)
            .map_err(|e| Error::Ingestion(format!("graph file line {}: {e}", n + 1)))?;
        g.validate()
            .map_err(|e| Error::Ingestion(format!("graph file line {}: {e}", n + 1)))?;
        out.push(g);
    }
    Ok(out)
}

type LabelRows = Vec<(String, Vec<Label>)>;

fn parse_labels(text: &str) -> Result<(Vec<String>, LabelRows)> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Ingestion("label file is empty".into()))?;
    let mut cols = header.split(',');
    if cols.next().map(str::trim) != Some("molecule") {
        return Err(Error::Ingestion("label file line 1: header must start with `molecule`".into()));
    }
    let props: Vec<String> = cols.map(|c| c.trim().to_string()).collect();
    if props.is_empty() || props.iter().any(String::is_empty) {
        return Err(Error::Ingestion("label file line 1: empty property id".into()));
    }
    let mut rows = Vec::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != props.len() + 1 {
            return Err(Error::Ingestion(format!(
                "label file line {}: expected {} cells, found {}",
                n + 1,
                props.len() + 1,
                cells.len()
            )));
        }
        let labels = cells[1..]
            .iter()
            .map(|c| match c.trim() {
                "1" => Ok(Label::Active),
                "0" => Ok(Label::Inactive),
                "" => Ok(Label::Unknown),
                other => Err(Error::Ingestion(format!(
                    "label file line {}: invalid cell `{other}`",
                    n + 1
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((cells[0].trim().to_string(), labels));
    }
    Ok((props, rows))
}

/// Writes the graph file and label file in the formats `load_dataset` reads.
pub fn save_dataset(ds: &Dataset, graph_file: &Path, label_file: &Path) -> Result<()> {
    let mut g = Vec::new();
    for m in &ds.molecules {
        serde_json::to_writer(&mut g, m)?;
        g.push(b'\n');
    }
    fs::write(graph_file, g)?;

    let l = &ds.labels;
    let mut out = String::from("molecule");
    for p in l.property_ids() {
        out.push(',');
        out.push_str(p);
    }
    out.push('\n');
    for (i, id) in l.molecule_ids().iter().enumerate() {
        out.push_str(id);
        for j in 0..l.num_properties() {
            out.push(',');
            match l.get(i, j) {
                Label::Active => out.push('1'),
                Label::Inactive => out.push('0'),
                Label::Unknown => {}
            }
        }
        out.push('\n');
    }
    fs::write(label_file, out)?;
    Ok(())
}

/// Square similarity matrix with a property-id header row and column.
pub fn write_similarity(path: &Path, property_ids: &[String], sim: &[Vec<f64>]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "property,{}", property_ids.join(","))?;
    for (id, row) in property_ids.iter().zip(sim) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(f, "{id},{}", cells.join(","))?;
    }
    Ok(())
}

pub fn read_similarity(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Ingestion("similarity file is empty".into()))?;
    let ids: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let row = line
            .split(',')
            .skip(1)
            .map(|c| {
                c.trim().parse::<f64>().map_err(|e| {
                    Error::Ingestion(format!("similarity file line {}: {e}", n + 2))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if row.len() != ids.len() {
            return Err(Error::Ingestion(format!("similarity file line {}: wrong width", n + 2)));
        }
        rows.push(row);
    }
    if rows.len() != ids.len() {
        return Err(Error::Ingestion("similarity matrix is not square".into()));
    }
    Ok((ids, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, graphs: &str, labels: &str) -> (std::path::PathBuf, std::path::PathBuf) {
        let g = dir.join("g.jsonl");
        let l = dir.join("l.csv");
        fs::write(&g, graphs).unwrap();
        fs::write(&l, labels).unwrap();
        (g, l)
    }

    #[test]
    fn parses_minimal_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let (g, l) = write(
            dir.path(),
            "{\"id\":\"m1\",\"atoms\":[0,1],\"bonds\":[[0,1,0]]}\n",
            "molecule,p1,p2\nm1,1,0\n",
        );
        let ds = load_dataset(&g, &l).unwrap();
        assert_eq!(ds.labels.get(0, 0), Label::Active);
        assert_eq!(ds.labels.get(0, 1), Label::Inactive);
    }

    #[test]
    fn empty_cell_is_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let (g, l) = write(
            dir.path(),
            "{\"id\":\"m1\",\"atoms\":[0],\"bonds\":[]}\n",
            "molecule,p1,p2\nm1,,1\n",
        );
        let ds = load_dataset(&g, &l).unwrap();
        assert_eq!(ds.labels.get(0, 0), Label::Unknown);
    }

    #[test]
    fn self_loop_in_file_rejected_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let (g, l) = write(
            dir.path(),
            "{\"id\":\"m0\",\"atoms\":[0],\"bonds\":[]}\n{\"id\":\"m1\",\"atoms\":[0,1],\"bonds\":[[1,1,0]]}\n",
            "molecule,p1\nm1,1\n",
        );
        let err = load_dataset(&g, &l).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn unresolved_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let (g, l) = write(
            dir.path(),
            "{\"id\":\"m1\",\"atoms\":[0],\"bonds\":[]}\n",
            "molecule,p1\nghost,1\n",
        );
        let err = load_dataset(&g, &l).unwrap_err().to_string();
        assert!(err.contains("ghost"), "{err}");
    }

    #[test]
    fn malformed_label_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let (g, l) = write(
            dir.path(),
            "{\"id\":\"m1\",\"atoms\":[0],\"bonds\":[]}\n",
            "molecule,p1\nm1,2\n",
        );
        let err = load_dataset(&g, &l).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }
}
