#include "msdu/app.hpp"

int main(int argc, char** argv) { return msdu::app::run(argc, argv); }
