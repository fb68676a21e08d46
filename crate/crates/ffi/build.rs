fn main() {
    println!("cargo:rerun-if-changed=include/cxrl.h");
}
