#include "amr/app.hpp"

int main(int argc, char** argv) { return amr::run_cli(argc, argv); }
