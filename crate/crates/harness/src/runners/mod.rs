pub mod dpo;
pub mod env;
pub mod overopt;
pub mod reject;
pub mod rl;
pub mod rm;
pub mod sft;
