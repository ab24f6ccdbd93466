#include "replica/frontend.hpp"

int main(int argc, char** argv) { return replica::cli::run(argc, argv); }
