pub mod config;
pub mod datagen;
pub mod error;
pub mod fredholm;
pub mod run;
pub mod metrics;
pub mod models;
pub mod pfnn;
pub mod quadrature;
pub mod tensor;
pub mod training;

// Training allocates and frees many matrix-sized buffers per epoch; the system
// allocator hands those pages back to the kernel on every free, which shows up
// as majority-share sys time on large grids. A pooling allocator removes that.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
