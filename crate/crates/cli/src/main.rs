fn main() {
    println!("{}", loadcast::probe());
}
