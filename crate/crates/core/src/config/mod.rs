//! Text configuration.

mod run;
mod text;

pub use run::{DataConfig, DataSource, Format, RunConfig, Step};
pub use text::{Document, Entry, Section, SectionReader};
