use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use super::{io_err, CellRecord, DataError, Result};
use crate::features::{CellFeatures, FEATURE_NAMES};

/// Required manifest columns, in the order they are written.
pub const MANIFEST_COLUMNS: [&str; 7] = [
    "cell_id",
    "image_path",
    "mask_path",
    "classmap_path",
    "day",
    "expert1",
    "expert2",
];

/// Loaded manifest: surviving records and the number of score-0 rows dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub records: Vec<CellRecord>,
    pub excluded: usize,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads a manifest CSV. Rows where either expert gave score 0 are dropped.
/// When all five (or all eleven) feature columns are present their values
/// are attached to every record.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = File::open(path).map_err(io_err(path))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header: HashMap<String, usize> = rdr
        .headers()?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.to_string(), i))
        .collect();
    let col = |name: &str| {
        header
            .get(name)
            .copied()
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let idx: Vec<usize> = MANIFEST_COLUMNS.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let feature_cols: Vec<usize> = FEATURE_NAMES.iter().map_while(|n| header.get(*n).copied()).collect();
    let feature_cols = match feature_cols.len() {
        11 => feature_cols,
        n if n >= 5 => feature_cols[..5].to_vec(),
        _ => Vec::new(),
    };

    let mut records = Vec::new();
    let mut excluded = 0;
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        // 1-based line number including the header
        let line = i + 2;
        let field = |k: usize| row.get(idx[k]).unwrap_or("");
        let parse_err = |k: usize, msg: String| DataError::Parse {
            row: line,
            column: MANIFEST_COLUMNS[k].to_string(),
            msg,
        };
        let score = |k: usize| -> Result<u8> {
            let v: u8 = field(k)
                .parse()
                .map_err(|_| parse_err(k, format!("`{}` is not an integer score", field(k))))?;
            if v > 5 {
                return Err(parse_err(k, format!("score {v} above 5")));
            }
            Ok(v)
        };
        let (e1, e2) = (score(5)?, score(6)?);
        let day: i64 = field(4)
            .parse()
            .map_err(|_| parse_err(4, format!("`{}` is not an integer day", field(4))))?;
        if field(0).is_empty() {
            return Err(parse_err(0, "empty cell id".into()));
        }
        if e1 == 0 || e2 == 0 {
            excluded += 1;
            continue;
        }
        let classmap = Some(field(3)).filter(|s| !s.is_empty());
        let mut rec = CellRecord::new(
            field(0),
            resolve(base, field(1)),
            resolve(base, field(2)),
            classmap.map(|c| resolve(base, c)),
            day,
            (e1, e2),
        );
        if !feature_cols.is_empty() {
            let values = feature_cols
                .iter()
                .zip(FEATURE_NAMES)
                .map(|(&c, name)| {
                    let s = row.get(c).unwrap_or("");
                    s.parse::<f64>().map_err(|_| DataError::Parse {
                        row: line,
                        column: name.to_string(),
                        msg: format!("`{s}` is not a number"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rec.features = Some(CellFeatures::from_values(&values).map_err(|e| DataError::Parse {
                row: line,
                column: "features".into(),
                msg: e.to_string(),
            })?);
        }
        records.push(rec);
    }
    if excluded > 0 {
        log::info!("excluded {excluded} manifest rows with an expert score of 0");
    }
    Ok(Manifest { records, excluded })
}

fn relative(base: &Path, p: &Path) -> String {
    p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned()
}

/// Writes records as a manifest with paths relative to `path`'s directory.
pub fn write_manifest(path: &Path, records: &[CellRecord]) -> Result<()> {
    let base = path.parent().unwrap_or(Path::new(""));
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(MANIFEST_COLUMNS)?;
    for r in records {
        w.write_record([
            r.cell_id.clone(),
            relative(base, &r.image_path),
            relative(base, &r.mask_path),
            r.classmap_path
                .as_deref()
                .map(|p| relative(base, p))
                .unwrap_or_default(),
            r.day.to_string(),
            r.expert1.to_string(),
            r.expert2.to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("manifest.csv");
        File::create(&p).unwrap().write_all(text.as_bytes()).unwrap();
        p
    }

    const HEADER: &str = "cell_id,image_path,mask_path,classmap_path,day,expert1,expert2\n";

    #[test]
    fn averaging_and_exclusion() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = HEADER.to_string();
        for i in 0..10 {
            text += &format!("c{i},img/{i}.png,m/{i}.png,,18,3,4\n");
        }
        text += "z1,a.png,b.png,,18,0,3\nz2,a.png,b.png,,32,5,0\n";
        let m = load_manifest(&write(dir.path(), &text)).unwrap();
        assert_eq!(m.records.len(), 10);
        assert_eq!(m.excluded, 2);
        assert_eq!(m.records[0].ground_truth, 3.5);
        assert_eq!(m.records[0].image_path, dir.path().join("img/0.png"));
        assert!(m.records[0].classmap_path.is_none());
        assert!(m.records[0].features.is_none());
    }

    #[test]
    fn parse_errors_name_the_row() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_manifest(&write(dir.path(), &format!("{HEADER}a,x,y,,18,3,4\nb,x,y,,18,6,4\n")))
            .unwrap_err()
            .to_string();
        assert!(err.contains("row 3") && err.contains("expert1"), "{err}");
        let err = load_manifest(&write(dir.path(), &format!("{HEADER}a,x,y,,18,3.5,4\n"))).unwrap_err();
        assert!(matches!(err, DataError::Parse { row: 2, .. }));
        let err = load_manifest(&write(dir.path(), "cell_id,image_path\n")).unwrap_err();
        assert!(matches!(err, DataError::MissingColumn(c) if c == "mask_path"));
        assert!(matches!(
            load_manifest(&dir.path().join("nope.csv")),
            Err(DataError::Io { .. })
        ));
    }

    #[test]
    fn feature_columns_are_used_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = HEADER.trim_end().to_string();
        for n in FEATURE_NAMES {
            text += &format!(",{n}");
        }
        text += "\nc,i.png,m.png,c.png,32,5,5,900,2,0.3,0.1,10,0,0.2,0.1,0.1,0.1,0.5\n";
        let m = load_manifest(&write(dir.path(), &text)).unwrap();
        let f = m.records[0].features.unwrap();
        assert_eq!(f.cell_area_px, 900.0);
        assert_eq!(f.fractions.unwrap()[5], 0.5);
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let recs: Vec<_> = (0..3)
            .map(|i| {
                CellRecord::new(
                    format!("c{i}"),
                    dir.path().join(format!("images/c{i}.png")),
                    dir.path().join(format!("masks/c{i}.png")),
                    Some(dir.path().join(format!("classmaps/c{i}.png"))),
                    18,
                    (2, 3),
                )
            })
            .collect();
        let p = dir.path().join("manifest.csv");
        write_manifest(&p, &recs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.contains("c0,images/c0.png,masks/c0.png,classmaps/c0.png,18,2,3"));
        assert_eq!(load_manifest(&p).unwrap().records, recs);
    }
}
