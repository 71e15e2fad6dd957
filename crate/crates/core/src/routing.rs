//! Network routing: the binary link-by-flow incidence matrix and the
//! routing equation `y = R x` relating flow volumes to link loads.
//!
//! A [`RoutingMatrix`] is immutable once built and can be shared freely
//! between threads.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `L x J` binary incidence of links on flow paths.
///
/// Entry `(l, j)` is set when flow `j`'s path traverses link `l`. Every flow
/// must traverse at least one link; links carrying no flow are allowed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RoutingRepr", into = "RoutingRepr")]
pub struct RoutingMatrix {
    n_links: usize,
    n_flows: usize,
    // row-major, n_links * n_flows
    entries: Vec<bool>,
    links_by_flow: Vec<Vec<usize>>,
    flows_by_link: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
struct RoutingRepr {
    rows: Vec<Vec<u8>>,
}

impl TryFrom<RoutingRepr> for RoutingMatrix {
    type Error = Error;

    fn try_from(repr: RoutingRepr) -> Result<Self> {
        RoutingMatrix::from_rows(&repr.rows)
    }
}

impl From<RoutingMatrix> for RoutingRepr {
    fn from(r: RoutingMatrix) -> Self {
        RoutingRepr { rows: r.to_rows() }
    }
}

impl RoutingMatrix {
    /// Builds a routing matrix from `0`/`1` rows, one per link.
    pub fn from_rows<T: AsRef<[u8]>>(rows: &[T]) -> Result<Self> {
        let n_links = rows.len();
        if n_links == 0 {
            return Err(Error::InvalidRouting("no links".into()));
        }
        let n_flows = rows[0].as_ref().len();
        if n_flows == 0 {
            return Err(Error::InvalidRouting("no flows".into()));
        }
        let mut entries = Vec::with_capacity(n_links * n_flows);
        for (l, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != n_flows {
                return Err(Error::InvalidRouting(format!(
                    "link {l} has {} entries, expected {n_flows}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                match v {
                    0 => entries.push(false),
                    1 => entries.push(true),
                    other => {
                        return Err(Error::InvalidRouting(format!(
                            "entry ({l}, {j}) is {other}, expected 0 or 1"
                        )))
                    }
                }
            }
        }
        Self::from_entries(n_links, n_flows, entries)
    }

    /// Builds a routing matrix from each flow's list of traversed links.
    pub fn from_paths(n_links: usize, paths: &[Vec<usize>]) -> Result<Self> {
        let n_flows = paths.len();
        if n_links == 0 || n_flows == 0 {
            return Err(Error::InvalidRouting("empty routing matrix".into()));
        }
        let mut entries = vec![false; n_links * n_flows];
        for (j, path) in paths.iter().enumerate() {
            for &l in path {
                if l >= n_links {
                    return Err(Error::IndexOutOfRange {
                        kind: "link",
                        index: l,
                        size: n_links,
                    });
                }
                entries[l * n_flows + j] = true;
            }
        }
        Self::from_entries(n_links, n_flows, entries)
    }

    fn from_entries(n_links: usize, n_flows: usize, entries: Vec<bool>) -> Result<Self> {
        let mut links_by_flow = vec![Vec::new(); n_flows];
        let mut flows_by_link = vec![Vec::new(); n_links];
        for l in 0..n_links {
            for j in 0..n_flows {
                if entries[l * n_flows + j] {
                    links_by_flow[j].push(l);
                    flows_by_link[l].push(j);
                }
            }
        }
        if let Some(j) = links_by_flow.iter().position(Vec::is_empty) {
            return Err(Error::InvalidRouting(format!(
                "flow {j} does not traverse any link"
            )));
        }
        Ok(Self {
            n_links,
            n_flows,
            entries,
            links_by_flow,
            flows_by_link,
        })
    }

    /// Each flow on its own dedicated link.
    pub fn identity(n: usize) -> Result<Self> {
        let paths: Vec<_> = (0..n).map(|j| vec![j]).collect();
        Self::from_paths(n, &paths)
    }

    pub fn n_links(&self) -> usize {
        self.n_links
    }

    pub fn n_flows(&self) -> usize {
        self.n_flows
    }

    pub fn get(&self, link: usize, flow: usize) -> bool {
        link < self.n_links && flow < self.n_flows && self.entries[link * self.n_flows + flow]
    }

    /// Links traversed by `flow`, in increasing order. Never empty.
    pub fn links_of_flow(&self, flow: usize) -> Result<&[usize]> {
        self.links_by_flow
            .get(flow)
            .map(Vec::as_slice)
            .ok_or(Error::IndexOutOfRange {
                kind: "flow",
                index: flow,
                size: self.n_flows,
            })
    }

    /// Flows crossing `link`, in increasing order. Empty for unused links.
    pub fn flows_on_link(&self, link: usize) -> Result<&[usize]> {
        self.flows_by_link
            .get(link)
            .map(Vec::as_slice)
            .ok_or(Error::IndexOutOfRange {
                kind: "link",
                index: link,
                size: self.n_links,
            })
    }

    /// Link loads from flow volumes: `y(l) = sum_j r(l, j) x(j)`.
    pub fn link_loads(&self, x: &FlowVolumeVector) -> Result<LinkLoadVector> {
        if x.len() != self.n_flows {
            return Err(Error::dims("link_loads", self.n_flows, x.len()));
        }
        let values = self
            .flows_by_link
            .iter()
            .map(|flows| flows.iter().map(|&j| x.0[j]).sum())
            .collect();
        Ok(LinkLoadVector(values))
    }

    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.entries
            .chunks(self.n_flows)
            .map(|row| row.iter().map(|&b| b as u8).collect())
            .collect()
    }

    /// Reads the `link,flow_0,...,flow_{J-1}` CSV format.
    pub fn read_csv<R: Read>(reader: R) -> std::result::Result<Self, CsvLoadError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.get(0).map(str::trim) != Some("link") {
            return Err(CsvLoadError::Format("first column must be `link`".into()));
        }
        for (j, h) in headers.iter().skip(1).enumerate() {
            if h.trim() != format!("flow_{j}") {
                return Err(CsvLoadError::Format(format!(
                    "column {} must be `flow_{j}`, found `{h}`",
                    j + 1
                )));
            }
        }
        let mut rows = Vec::new();
        for (l, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .skip(1)
                .map(|cell| match cell.trim() {
                    "0" => Ok(0u8),
                    "1" => Ok(1u8),
                    other => Err(CsvLoadError::Format(format!(
                        "link row {l}: cell `{other}` is not 0 or 1"
                    ))),
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        Ok(Self::from_rows(&rows)?)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file).map_err(|e| e.into_error(path))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        let mut header = vec!["link".to_string()];
        header.extend((0..self.n_flows).map(|j| format!("flow_{j}")));
        w.write_record(&header)?;
        for (l, row) in self.to_rows().iter().enumerate() {
            let mut rec = vec![l.to_string()];
            rec.extend(row.iter().map(u8::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file).map_err(|e| Error::csv(path, e))
    }
}

/// Failure reading one of the CSV input formats.
#[derive(Debug, thiserror::Error)]
pub enum CsvLoadError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Invalid(#[from] Error),
}

impl CsvLoadError {
    pub(crate) fn into_error(self, path: &Path) -> Error {
        match self {
            CsvLoadError::Csv(e) => Error::csv(path, e),
            CsvLoadError::Format(msg) => Error::Config(format!("{}: {msg}", path.display())),
            CsvLoadError::Invalid(e) => e,
        }
    }
}

/// Per-flow volumes for one time slot (packets per slot).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowVolumeVector(Vec<f64>);

impl FlowVolumeVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(j) = values.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "flow volume {j} is {} (must be finite and nonnegative)",
                values[j]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for FlowVolumeVector {
    type Output = f64;
    fn index(&self, j: usize) -> &f64 {
        &self.0[j]
    }
}

/// Per-link loads for one time slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkLoadVector(Vec<f64>);

impl LinkLoadVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small() -> RoutingMatrix {
        RoutingMatrix::from_rows(&[[1, 0, 1], [0, 1, 1]]).unwrap()
    }

    #[test]
    fn links_of_flow_reads_column() {
        let r = small();
        assert_eq!(r.links_of_flow(2).unwrap(), &[0, 1]);
        assert_eq!(r.links_of_flow(0).unwrap(), &[0]);
        assert!(matches!(
            r.links_of_flow(3),
            Err(Error::IndexOutOfRange { kind: "flow", .. })
        ));
    }

    #[test]
    fn zero_column_is_rejected() {
        let err = RoutingMatrix::from_rows(&[[1, 0], [1, 0]]).unwrap_err();
        assert!(matches!(err, Error::InvalidRouting(_)));
    }

    #[test]
    fn non_binary_entry_is_rejected() {
        assert!(RoutingMatrix::from_rows(&[[1, 2]]).is_err());
    }

    #[test]
    fn flows_on_link_reads_row() {
        let r = small();
        assert_eq!(r.flows_on_link(0).unwrap(), &[0, 2]);
        assert_eq!(r.flows_on_link(1).unwrap(), &[1, 2]);
        assert!(r.flows_on_link(2).is_err());

        let unused = RoutingMatrix::from_rows(&[[1, 1], [0, 0]]).unwrap();
        assert!(unused.flows_on_link(1).unwrap().is_empty());
    }

    #[test]
    fn link_loads_matches_product() {
        let r = small();
        let y = r
            .link_loads(&FlowVolumeVector::new(vec![10.0, 20.0, 30.0]).unwrap())
            .unwrap();
        assert_eq!(y.as_slice(), &[40.0, 50.0]);
        let y0 = r.link_loads(&FlowVolumeVector::zeros(3)).unwrap();
        assert_eq!(y0.as_slice(), &[0.0, 0.0]);
        assert!(r.link_loads(&FlowVolumeVector::zeros(2)).is_err());
    }

    #[test]
    fn identity_routing_passes_volumes_through() {
        let r = RoutingMatrix::identity(4).unwrap();
        let x = FlowVolumeVector::new(vec![3.0, 1.5, 0.0, 9.0]).unwrap();
        assert_eq!(r.link_loads(&x).unwrap().as_slice(), x.as_slice());
    }

    #[test]
    fn csv_round_trip_and_rejects_bad_cells() {
        let r = small();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "link,flow_0,flow_1,flow_2\n0,1,0,1\n1,0,1,1\n");
        assert_eq!(RoutingMatrix::read_csv(buf.as_slice()).unwrap(), r);

        let bad = "link,flow_0,flow_1\n0,1,0.5\n";
        assert!(matches!(
            RoutingMatrix::read_csv(bad.as_bytes()),
            Err(CsvLoadError::Format(_))
        ));
        let bad_header = "link,a,b\n0,1,1\n";
        assert!(RoutingMatrix::read_csv(bad_header.as_bytes()).is_err());
    }

    fn arb_routing() -> impl Strategy<Value = RoutingMatrix> {
        (1usize..6, 1usize..6).prop_flat_map(|(l, j)| {
            prop::collection::vec(prop::collection::vec(0u8..2, j), l)
                .prop_filter_map("every flow needs a link", |rows| {
                    RoutingMatrix::from_rows(&rows).ok()
                })
        })
    }

    proptest! {
        #[test]
        fn incidence_views_are_transposes(r in arb_routing()) {
            for l in 0..r.n_links() {
                for j in 0..r.n_flows() {
                    let a = r.flows_on_link(l).unwrap().contains(&j);
                    let b = r.links_of_flow(j).unwrap().contains(&l);
                    prop_assert_eq!(a, b);
                    prop_assert_eq!(a, r.get(l, j));
                }
            }
        }

        #[test]
        fn link_loads_linear_and_monotone(
            r in arb_routing(),
            seed in prop::collection::vec(0.0f64..1e4, 12),
            a in 0.0f64..5.0,
            b in 0.0f64..5.0,
            bump in 0.0f64..100.0,
        ) {
            let j = r.n_flows();
            let x1 = FlowVolumeVector::new(seed[..j].to_vec()).unwrap();
            let x2 = FlowVolumeVector::new(seed[6..6 + j].to_vec()).unwrap();
            let mix: Vec<f64> = (0..j).map(|k| a * x1[k] + b * x2[k]).collect();
            let y = r.link_loads(&FlowVolumeVector::new(mix.clone()).unwrap()).unwrap();
            let y1 = r.link_loads(&x1).unwrap();
            let y2 = r.link_loads(&x2).unwrap();
            for l in 0..r.n_links() {
                let expect = a * y1.as_slice()[l] + b * y2.as_slice()[l];
                prop_assert!((y.as_slice()[l] - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
            }
            let mut bumped = mix.clone();
            bumped[0] += bump;
            let yb = r.link_loads(&FlowVolumeVector::new(bumped).unwrap()).unwrap();
            for l in 0..r.n_links() {
                prop_assert!(yb.as_slice()[l] >= y.as_slice()[l]);
            }
        }
    }
}
