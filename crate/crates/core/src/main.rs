fn main() {
    println!("refsfm");
}
