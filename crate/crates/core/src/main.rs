fn main() {
    std::process::exit(egl_core::cli::main());
}
