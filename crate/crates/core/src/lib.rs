pub mod imaging;
pub mod polconstraint;
pub mod tensorcore;
pub mod neuralfield;
pub mod volrender;
pub mod synthdata;
pub mod trainer;
pub mod meshmetrics;
mod mc_tables;
