pub mod microtensor;
pub mod patching;
pub mod swinlite;
pub mod ssl_losses;
pub mod contrastive;
pub mod datalab;
pub mod federation;
pub mod harness;
