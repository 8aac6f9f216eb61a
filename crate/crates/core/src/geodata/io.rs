//! CSV / GeoJSON readers and CSV writers for city inputs.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde_json::Value;

use super::{Adjacency, CityGraph, FeatureTable, FlowNetwork, Region, KNN_ADJACENCY};
use crate::error::{Error, Result};

fn file_label(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn parse_f64(raw: &str, file: &str, row: usize, column: &str) -> Result<f64> {
    raw.parse::<f64>().map_err(|_| Error::Parse {
        file: file.to_string(),
        row,
        message: format!("column {column}: '{raw}' is not a number"),
    })
}

fn csv_error(e: csv::Error, file: &str) -> Error {
    let row = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        file: file.to_string(),
        row,
        message: e.to_string(),
    }
}

/// Loads regions, features and (optionally) flows.
///
/// Regions come from CSV (`id,lat,lon,area_km2,population[,income]`) or a
/// GeoJSON FeatureCollection (by `.geojson` / `.json` extension). Polygon
/// geometry, when present for every feature, drives adjacency; otherwise
/// the six nearest centroids are used.
pub fn load_city(
    regions_path: &Path,
    features_path: &Path,
    flows_path: Option<&Path>,
) -> Result<(CityGraph, Option<FlowNetwork>)> {
    let ext = regions_path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    let (regions, rings) = if ext == "geojson" || ext == "json" {
        read_regions_geojson(regions_path)?
    } else {
        (read_regions_csv(regions_path)?, None)
    };
    let features = read_features_csv(features_path, &regions)?;
    let adjacency = match rings {
        Some(r) => Adjacency::Polygons(r),
        None => Adjacency::Knn(KNN_ADJACENCY),
    };
    let city = CityGraph::new(regions, features, adjacency)?;
    let flows = flows_path.map(|p| load_flows(p, &city)).transpose()?;
    Ok((city, flows))
}

/// Loads regions alone, with an empty feature table.
pub fn load_regions(regions_path: &Path) -> Result<CityGraph> {
    let ext = regions_path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    let (regions, rings) = if ext == "geojson" || ext == "json" {
        read_regions_geojson(regions_path)?
    } else {
        (read_regions_csv(regions_path)?, None)
    };
    let features = FeatureTable::new(vec![], vec![vec![]; regions.len()])?;
    let adjacency = match rings {
        Some(r) => Adjacency::Polygons(r),
        None => Adjacency::Knn(KNN_ADJACENCY),
    };
    CityGraph::new(regions, features, adjacency)
}

fn read_regions_csv(path: &Path) -> Result<Vec<Region>> {
    let label = file_label(path);
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers().map_err(|e| csv_error(e, &label))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let required = ["id", "lat", "lon", "area_km2", "population"];
    let mut idx = [0usize; 5];
    for (k, name) in required.iter().enumerate() {
        idx[k] = col(name).ok_or_else(|| Error::Parse {
            file: label.clone(),
            row: 1,
            message: format!("missing column {name}"),
        })?;
    }
    let income_col = col("income");
    let mut out = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 2;
        let rec = rec.map_err(|e| csv_error(e, &label))?;
        let get = |k: usize| rec.get(k).unwrap_or("");
        let income = match income_col.map(&get) {
            Some(s) if !s.is_empty() => Some(parse_f64(s, &label, row, "income")?),
            _ => None,
        };
        out.push(Region {
            id: get(idx[0]).to_string(),
            lat: parse_f64(get(idx[1]), &label, row, "lat")?,
            lon: parse_f64(get(idx[2]), &label, row, "lon")?,
            area_km2: parse_f64(get(idx[3]), &label, row, "area_km2")?,
            population: parse_f64(get(idx[4]), &label, row, "population")?,
            income,
            neighbors: vec![],
        });
    }
    Ok(out)
}

type Rings = Option<Vec<Vec<(f64, f64)>>>;

fn read_regions_geojson(path: &Path) -> Result<(Vec<Region>, Rings)> {
    let label = file_label(path);
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc: Value = serde_json::from_str(&text)?;
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Load(format!("{label}: not a FeatureCollection")))?;
    let mut regions = Vec::with_capacity(features.len());
    let mut rings = Vec::with_capacity(features.len());
    let mut all_rings = true;
    for (k, feat) in features.iter().enumerate() {
        let row = k + 1;
        let props = feat.get("properties").cloned().unwrap_or(Value::Null);
        let num = |name: &str| -> Result<Option<f64>> {
            match props.get(name) {
                None | Some(Value::Null) => Ok(None),
                Some(Value::Number(n)) => Ok(n.as_f64()),
                Some(Value::String(s)) => parse_f64(s, &label, row, name).map(Some),
                Some(other) => Err(Error::Parse {
                    file: label.clone(),
                    row,
                    message: format!("property {name}: '{other}' is not a number"),
                }),
            }
        };
        let id = match props.get("id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => {
                return Err(Error::Parse {
                    file: label,
                    row,
                    message: "missing id property".into(),
                })
            }
        };
        let ring = feat.get("geometry").and_then(outer_ring);
        let (lat, lon) = match (num("lat")?, num("lon")?) {
            (Some(lat), Some(lon)) => (lat, lon),
            _ => match &ring {
                Some(r) if !r.is_empty() => {
                    let n = r.len() as f64;
                    // GeoJSON positions are (lon, lat)
                    (r.iter().map(|p| p.1).sum::<f64>() / n, r.iter().map(|p| p.0).sum::<f64>() / n)
                }
                _ => {
                    return Err(Error::Parse {
                        file: label,
                        row,
                        message: "missing lat/lon and geometry".into(),
                    })
                }
            },
        };
        let missing = |name: &str| Error::Parse {
            file: label.clone(),
            row,
            message: format!("missing property {name}"),
        };
        regions.push(Region {
            id,
            lat,
            lon,
            area_km2: num("area_km2")?.ok_or_else(|| missing("area_km2"))?,
            population: num("population")?.ok_or_else(|| missing("population"))?,
            income: num("income")?,
            neighbors: vec![],
        });
        match ring {
            Some(r) => rings.push(r),
            None => all_rings = false,
        }
    }
    Ok((regions, all_rings.then_some(rings)))
}

fn outer_ring(geom: &Value) -> Option<Vec<(f64, f64)>> {
    let coords = geom.get("coordinates")?;
    let ring = match geom.get("type")?.as_str()? {
        "Polygon" => coords.get(0)?,
        "MultiPolygon" => coords.get(0)?.get(0)?,
        _ => return None,
    };
    let pts: Option<Vec<(f64, f64)>> = ring
        .as_array()?
        .iter()
        .map(|p| Some((p.get(0)?.as_f64()?, p.get(1)?.as_f64()?)))
        .collect();
    let mut pts = pts?;
    if pts.len() > 1 && pts.first() == pts.last() {
        pts.pop();
    }
    Some(pts)
}

fn read_features_csv(path: &Path, regions: &[Region]) -> Result<FeatureTable> {
    let label = file_label(path);
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers().map_err(|e| csv_error(e, &label))?.clone();
    if headers.get(0) != Some("id") {
        return Err(Error::Parse {
            file: label,
            row: 1,
            message: "first column must be id".into(),
        });
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let index: HashMap<&str, usize> = regions.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; regions.len()];
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 2;
        let rec = rec.map_err(|e| csv_error(e, &label))?;
        let id = rec.get(0).unwrap_or("");
        let &i = index.get(id).ok_or_else(|| Error::UnknownRegion(id.to_string()))?;
        if rows[i].is_some() {
            return Err(Error::Load(format!("duplicate feature row for region {id}")));
        }
        let values = names
            .iter()
            .enumerate()
            .map(|(k, name)| parse_f64(rec.get(k + 1).unwrap_or(""), &label, row, name))
            .collect::<Result<Vec<f64>>>()?;
        rows[i] = Some(values);
    }
    let rows = rows
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.ok_or_else(|| Error::Load(format!("region {} has no feature row", regions[i].id))))
        .collect::<Result<Vec<_>>>()?;
    FeatureTable::new(names, rows)
}

/// Reads `origin,destination,flow` rows against an existing city.
///
/// Self-flows are dropped; non-positive flows are rejected.
pub fn load_flows(path: &Path, city: &CityGraph) -> Result<FlowNetwork> {
    let label = file_label(path);
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers().map_err(|e| csv_error(e, &label))?.clone();
    let expected = ["origin", "destination", "flow"];
    if headers.len() < 3 || headers.iter().take(3).zip(expected).any(|(a, b)| a != b) {
        return Err(Error::Parse {
            file: label,
            row: 1,
            message: "header must be origin,destination,flow".into(),
        });
    }
    let mut entries = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let row = r + 2;
        let rec = rec.map_err(|e| csv_error(e, &label))?;
        let lookup = |k: usize| {
            let id = rec.get(k).unwrap_or("");
            city.index_of(id).ok_or_else(|| Error::UnknownRegion(id.to_string()))
        };
        let o = lookup(0)?;
        let d = lookup(1)?;
        let f = parse_f64(rec.get(2).unwrap_or(""), &label, row, "flow")?;
        if !(f > 0.0) || !f.is_finite() {
            return Err(Error::Parse {
                file: label,
                row,
                message: format!("flow must be positive, got {f}"),
            });
        }
        if o != d {
            entries.push(((o, d), f));
        }
    }
    FlowNetwork::new(entries)
}

fn create(path: &Path) -> Result<std::io::BufWriter<File>> {
    File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Writes the regions CSV; the income column appears only if every region has one.
pub fn write_regions_csv(city: &CityGraph, path: &Path) -> Result<()> {
    let with_income = city.regions().iter().all(|r| r.income.is_some());
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    let header = if with_income {
        "id,lat,lon,area_km2,population,income"
    } else {
        "id,lat,lon,area_km2,population"
    };
    writeln!(w, "{header}").map_err(io)?;
    for r in city.regions() {
        write!(w, "{},{},{},{},{}", r.id, r.lat, r.lon, r.area_km2, r.population).map_err(io)?;
        if with_income {
            write!(w, ",{}", r.income.unwrap_or_default()).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_features_csv(city: &CityGraph, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "id,{}", city.features().names().join(",")).map_err(io)?;
    for (i, r) in city.regions().iter().enumerate() {
        write!(w, "{}", r.id).map_err(io)?;
        for v in city.features().row(i) {
            write!(w, ",{v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Writes `origin,destination,flow` rows for every stored flow.
pub fn write_flows_csv<'a>(
    city: &CityGraph,
    flows: impl IntoIterator<Item = (&'a (usize, usize), &'a f64)>,
    path: &Path,
) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(path, e);
    writeln!(w, "origin,destination,flow").map_err(io)?;
    for (&(o, d), &f) in flows {
        writeln!(w, "{},{},{}", city.region(o).id, city.region(d).id, f).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
        let regions = write(
            dir,
            "regions.csv",
            "id,lat,lon,area_km2,population,income\nA,42.36,-71.06,2.5,1000,50000\nB,42.37,-71.05,3.0,2000,60000\nC,42.35,-71.08,1.5,500,40000\n",
        );
        let features = write(dir, "features.csv", "id,res_frac,poi_density\nB,0.4,12\nA,0.5,10\nC,0.3,3\n");
        (regions, features)
    }

    #[test]
    fn loads_three_region_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (regions, features) = fixture(dir.path());
        let flows = write(dir.path(), "flows.csv", "origin,destination,flow\nA,B,3.5\nB,A,1.25\nC,A,2\nA,A,9\n");
        let (city, net) = load_city(&regions, &features, Some(&flows)).unwrap();
        assert_eq!(city.n_regions(), 3);
        assert_eq!(city.features().row(0), &[0.5, 10.0]);
        for i in 0..3 {
            assert_eq!(city.distance(i, i), 0.0);
            for j in 0..3 {
                assert_eq!(city.distance(i, j), city.distance(j, i));
            }
        }
        let net = net.unwrap();
        assert_eq!(net.len(), 3);
        assert_eq!(net.flow((0, 1)), 3.5);
        assert_eq!(city.region(2).income, Some(40000.0));
    }

    #[test]
    fn regions_only_load_keeps_income() {
        let dir = tempfile::tempdir().unwrap();
        let (regions, _) = fixture(dir.path());
        let city = load_regions(&regions).unwrap();
        assert_eq!(city.n_regions(), 3);
        assert_eq!(city.features().n_features(), 0);
        assert_eq!(city.region(1).income, Some(60000.0));
    }

    #[test]
    fn unknown_flow_region_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let (regions, features) = fixture(dir.path());
        let flows = write(dir.path(), "flows.csv", "origin,destination,flow\nA,Z99,3.5\n");
        let err = load_city(&regions, &features, Some(&flows)).unwrap_err();
        assert_eq!(err.to_string(), "unknown region Z99");
    }

    #[test]
    fn non_numeric_field_reports_row() {
        let dir = tempfile::tempdir().unwrap();
        let regions = write(
            dir.path(),
            "regions.csv",
            "id,lat,lon,area_km2,population\nA,42.36,-71.06,2.5,1000\nB,42.37,abc,3.0,2000\n",
        );
        let features = write(dir.path(), "features.csv", "id,x\nA,1\nB,2\n");
        match load_city(&regions, &features, None).unwrap_err() {
            Error::Parse { row, .. } => assert_eq!(row, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_feature_row_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let (regions, _) = fixture(dir.path());
        let features = write(dir.path(), "features.csv", "id,x\nA,1\nB,2\n");
        let err = load_city(&regions, &features, None).unwrap_err();
        assert!(err.to_string().contains("C"), "{err}");
    }

    #[test]
    fn geojson_polygons_drive_adjacency() {
        let dir = tempfile::tempdir().unwrap();
        let sq = |x: f64| {
            format!(
                "[[[{x},42.0],[{},42.0],[{},42.01],[{x},42.01],[{x},42.0]]]",
                x + 0.01,
                x + 0.01
            )
        };
        let feat = |id: &str, x: f64| {
            format!(
                r#"{{"type":"Feature","properties":{{"id":"{id}","area_km2":1.0,"population":10}},"geometry":{{"type":"Polygon","coordinates":{}}}}}"#,
                sq(x)
            )
        };
        let body = format!(
            r#"{{"type":"FeatureCollection","features":[{},{},{}]}}"#,
            feat("a", -71.0),
            feat("b", -70.99),
            feat("c", -70.98)
        );
        let regions = write(dir.path(), "regions.geojson", &body);
        let features = write(dir.path(), "features.csv", "id,x\na,1\nb,2\nc,3\n");
        let (city, _) = load_city(&regions, &features, None).unwrap();
        assert_eq!(city.region(0).neighbors, vec![1]);
        assert_eq!(city.region(1).neighbors, vec![0, 2]);
        assert!((city.region(0).lat - 42.005).abs() < 1e-9);
    }

    #[test]
    fn boston_scale_flow_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let mut regions = String::from("id,lat,lon,area_km2,population\n");
        let mut features = String::from("id,f\n");
        for i in 0..250 {
            let (r, c) = (i / 16, i % 16);
            regions.push_str(&format!("Z{i},{},{},4.0,{}\n", 42.2 + 0.02 * r as f64, -71.3 + 0.025 * c as f64, 1000 + i));
            features.push_str(&format!("Z{i},{}\n", i % 7));
        }
        let mut flows = String::from("origin,destination,flow\n");
        let mut count = 0;
        'outer: for i in 0..250 {
            for j in 0..250 {
                if i != j {
                    flows.push_str(&format!("Z{i},Z{j},{}\n", 1.0 + (i * j % 13) as f64));
                    count += 1;
                    if count == 51_786 {
                        break 'outer;
                    }
                }
            }
        }
        let r = write(dir.path(), "regions.csv", &regions);
        let f = write(dir.path(), "features.csv", &features);
        let fl = write(dir.path(), "flows.csv", &flows);
        let (city, net) = load_city(&r, &f, Some(&fl)).unwrap();
        assert_eq!(city.n_regions(), 250);
        assert_eq!(net.unwrap().len(), 51_786);
    }
}
