//! Panels of multivariate series, sliding windows, synthetic benchmarks and
//! the fill strategies used to rewrite flagged training points.

mod fill;
mod io;
mod panel;
mod synthetic;
mod windows;

pub use fill::{
    fill_anomalies, FillAction, FillParams, FillRecord, FillRegistry, FillStrategy, LowessFill,
    NeighborMeanFill, PeriodicMeanFill, RemoveFill,
};
pub use io::{
    load_panel, parse_graph, parse_panel_csv, read_labels, write_graph, write_labels, write_panel,
    LoadOptions, MissingPolicy,
};
pub use panel::{NormStats, SeriesPanel};
pub use synthetic::{clean_reference, generate_synthetic, AnomalyKind, AnomalySpec, SyntheticSpec};
pub use windows::{make_windows, SplitSpec, WindowSample, WindowSplits};
