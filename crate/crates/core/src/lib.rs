pub mod address;
pub mod cache;
pub mod cli;
pub mod experiments;
pub mod machine;
pub mod oracle;
pub mod programs;
pub mod report;
pub mod sidechannel;
pub mod uarch;

pub use address::{Address, LINES_PER_PAGE, LINE_SIZE, PAGE_SIZE};
pub use cache::{Cache, CacheConfig, CacheError, MinimalEvictionSet};
pub use machine::{LoadResult, Machine};
pub use uarch::{PrefetchRequest, PrefetchTable, PrefetcherEntry, Tlb};
