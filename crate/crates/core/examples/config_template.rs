//! Prints the default run configuration as TOML, a starting point for
//! `vtr --config`.

use monovtr::config::RunConfig;

fn main() {
    print!("{}", RunConfig::default().to_toml());
}
