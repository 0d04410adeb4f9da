//! Synthetic scenarios and file I/O.

mod generators;
mod io;

pub use generators::{
    gen_piecewise_sim, gen_piecewise_with, gen_switchlike, gen_switchlike_with, gen_waveform,
    gen_waveform_with, switch_regime_mean, waveform_base, waveform_mean, PiecewiseOptions, Scenario,
    SwitchOptions, WAVEFORM_PAIRS,
};
pub use io::{
    int_matrix_csv, labels_csv, load_csv, matrix_csv, read_labels, read_matrix, save_csv, save_dataset,
    save_outputs, write_atomic, ClusterParamsFile, OutputBundle, ParamsFile, Report, OUTPUT_FILES,
};
